//! Planar polygons with holes and the area of their intersection.
//!
//! The intersection area is computed without building the clipped polygon.
//! By Green's theorem the area of `A ∩ B` is `½∮ (x dy − y dx)` over its
//! boundary, and that boundary is made of the pieces of `∂A` lying inside `B`,
//! the pieces of `∂B` lying inside `A`, and the stretches where the two
//! boundaries coincide with the same orientation. Each edge is cut at every
//! point where it meets the other boundary and every sub-segment is classified
//! by its midpoint.

use serde::{Deserialize, Serialize};

use super::ArealError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }

    fn lerp(self, o: Point, t: f64) -> Point {
        Point::new(self.x + t * (o.x - self.x), self.y + t * (o.y - self.y))
    }
}

fn cross(a: Point, b: Point) -> f64 {
    a.x * b.y - a.y * b.x
}

fn dot(a: Point, b: Point) -> f64 {
    a.x * b.x + a.y * b.y
}

/// Closed ring; the closing vertex is implicit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ring(Vec<Point>);

impl Ring {
    /// Drops a repeated closing vertex and consecutive duplicates.
    pub fn new(mut points: Vec<Point>) -> Self {
        points.dedup();
        if points.len() > 1 && points.first() == points.last() {
            points.pop();
        }
        Self(points)
    }

    pub fn points(&self) -> &[Point] {
        &self.0
    }

    /// Shoelace signed area; positive when counter-clockwise.
    pub fn signed_area(&self) -> f64 {
        let pts = &self.0;
        if pts.len() < 3 {
            return 0.0;
        }
        let origin = pts[0];
        let mut sum = 0.0;
        for k in 1..pts.len() - 1 {
            sum += cross(pts[k].sub(origin), pts[k + 1].sub(origin));
        }
        0.5 * sum
    }

    fn edges(&self) -> impl Iterator<Item = (Point, Point)> + '_ {
        let n = self.0.len();
        (0..n).map(move |k| (self.0[k], self.0[(k + 1) % n]))
    }

    fn oriented(mut self, ccw: bool) -> Self {
        if (self.signed_area() > 0.0) != ccw {
            self.0.reverse();
        }
        self
    }

    fn translated(&self, by: Point) -> Ring {
        Ring(self.0.iter().map(|p| p.sub(by)).collect())
    }

    fn has_self_intersection(&self) -> bool {
        let edges: Vec<(Point, Point)> = self.edges().collect();
        let n = edges.len();
        for i in 0..n {
            for j in i + 1..n {
                let adjacent = j == i + 1 || (i == 0 && j == n - 1);
                let (a, b) = edges[i];
                let (c, d) = edges[j];
                if adjacent {
                    // Adjacent edges may only share their common vertex: reject folding back.
                    let (shared, u, v) = if j == i + 1 { (b, a, d) } else { (a, b, c) };
                    let cu = cross(u.sub(shared), v.sub(shared));
                    if cu == 0.0 && dot(u.sub(shared), v.sub(shared)) > 0.0 {
                        return true;
                    }
                } else if segments_touch(a, b, c, d) {
                    return true;
                }
            }
        }
        false
    }

    /// Crossing-number parity for a point not on the ring.
    fn crossings(&self, p: Point) -> bool {
        let mut inside = false;
        for (a, b) in self.edges() {
            if (a.y > p.y) != (b.y > p.y) {
                let x = a.x + (p.y - a.y) / (b.y - a.y) * (b.x - a.x);
                if p.x < x {
                    inside = !inside;
                }
            }
        }
        inside
    }
}

fn orient(a: Point, b: Point, c: Point) -> f64 {
    cross(b.sub(a), c.sub(a))
}

fn on_segment(a: Point, b: Point, p: Point) -> bool {
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

fn segments_touch(a: Point, b: Point, c: Point, d: Point) -> bool {
    let d1 = orient(c, d, a);
    let d2 = orient(c, d, b);
    let d3 = orient(a, b, c);
    let d4 = orient(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(c, d, a))
        || (d2 == 0.0 && on_segment(c, d, b))
        || (d3 == 0.0 && on_segment(a, b, c))
        || (d4 == 0.0 && on_segment(a, b, d))
}

/// One outer ring and its holes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolygonPart {
    pub outer: Ring,
    pub holes: Vec<Ring>,
}

/// A district geometry valid for one census epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Zone {
    pub zone_id: String,
    pub epoch_year: i32,
    parts: Vec<PolygonPart>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct BBox {
    min: Point,
    max: Point,
}

impl BBox {
    fn overlaps(&self, o: &BBox) -> bool {
        self.min.x <= o.max.x && o.min.x <= self.max.x && self.min.y <= o.max.y && o.min.y <= self.max.y
    }

    fn union(&self, o: &BBox) -> BBox {
        BBox {
            min: Point::new(self.min.x.min(o.min.x), self.min.y.min(o.min.y)),
            max: Point::new(self.max.x.max(o.max.x), self.max.y.max(o.max.y)),
        }
    }
}

impl Zone {
    /// Validates every ring and normalizes orientation (outer rings
    /// counter-clockwise, holes clockwise).
    pub fn new(
        zone_id: impl Into<String>,
        epoch_year: i32,
        parts: Vec<PolygonPart>,
    ) -> Result<Self, ArealError> {
        let zone_id = zone_id.into();
        if parts.is_empty() {
            return Err(ArealError::DegenerateRing {
                zone: zone_id,
                detail: "no polygons".into(),
            });
        }
        let mut normalized = Vec::with_capacity(parts.len());
        for part in parts {
            for ring in std::iter::once(&part.outer).chain(&part.holes) {
                validate_ring(&zone_id, ring)?;
            }
            for hole in &part.holes {
                if !hole.points().iter().all(|p| part.outer.crossings(*p)) {
                    return Err(ArealError::GeometryFailure {
                        zone: zone_id,
                        detail: "hole not strictly inside its outer ring".into(),
                    });
                }
            }
            normalized.push(PolygonPart {
                outer: part.outer.oriented(true),
                holes: part.holes.into_iter().map(|h| h.oriented(false)).collect(),
            });
        }
        Ok(Self {
            zone_id,
            epoch_year,
            parts: normalized,
        })
    }

    /// Single outer ring without holes.
    pub fn simple(zone_id: impl Into<String>, epoch_year: i32, outer: Vec<Point>) -> Result<Self, ArealError> {
        Self::new(
            zone_id,
            epoch_year,
            vec![PolygonPart {
                outer: Ring::new(outer),
                holes: vec![],
            }],
        )
    }

    /// Axis-aligned rectangle `[x0, x1] × [y0, y1]`.
    pub fn rect(zone_id: impl Into<String>, epoch_year: i32, x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, ArealError> {
        Self::simple(
            zone_id,
            epoch_year,
            vec![
                Point::new(x0, y0),
                Point::new(x1, y0),
                Point::new(x1, y1),
                Point::new(x0, y1),
            ],
        )
    }

    pub fn parts(&self) -> &[PolygonPart] {
        &self.parts
    }

    fn rings(&self) -> impl Iterator<Item = &Ring> {
        self.parts
            .iter()
            .flat_map(|p| std::iter::once(&p.outer).chain(&p.holes))
    }

    fn bbox(&self) -> BBox {
        let mut min = Point::new(f64::INFINITY, f64::INFINITY);
        let mut max = Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in self.parts.iter().flat_map(|part| part.outer.points()) {
            min = Point::new(min.x.min(p.x), min.y.min(p.y));
            max = Point::new(max.x.max(p.x), max.y.max(p.y));
        }
        BBox { min, max }
    }

    /// Moves every vertex by `offset`.
    pub fn translate(&self, dx: f64, dy: f64) -> Zone {
        let by = Point::new(-dx, -dy);
        Zone {
            zone_id: self.zone_id.clone(),
            epoch_year: self.epoch_year,
            parts: self.parts.iter().map(|p| shift_part(p, by)).collect(),
        }
    }

    fn contains(&self, p: Point) -> bool {
        self.parts
            .iter()
            .any(|part| part.outer.crossings(p) && !part.holes.iter().any(|h| h.crossings(p)))
    }
}

fn shift_part(p: &PolygonPart, by: Point) -> PolygonPart {
    PolygonPart {
        outer: p.outer.translated(by),
        holes: p.holes.iter().map(|h| h.translated(by)).collect(),
    }
}

fn validate_ring(zone: &str, ring: &Ring) -> Result<(), ArealError> {
    let mut distinct: Vec<Point> = ring.points().to_vec();
    distinct.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    distinct.dedup();
    if distinct.len() < 3 || ring.points().iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
        return Err(ArealError::DegenerateRing {
            zone: zone.to_string(),
            detail: format!("{} distinct finite vertices", distinct.len()),
        });
    }
    if ring.signed_area() == 0.0 {
        return Err(ArealError::DegenerateRing {
            zone: zone.to_string(),
            detail: "zero area".into(),
        });
    }
    if ring.has_self_intersection() {
        return Err(ArealError::GeometryFailure {
            zone: zone.to_string(),
            detail: "self-intersecting ring".into(),
        });
    }
    Ok(())
}

/// Outer areas minus hole areas.
pub fn polygon_area(zone: &Zone) -> f64 {
    zone.parts
        .iter()
        .map(|p| p.outer.signed_area().abs() - p.holes.iter().map(|h| h.signed_area().abs()).sum::<f64>())
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    Inside,
    Outside,
    /// On the other boundary, running in the same direction.
    SharedSame,
    /// On the other boundary, running in the opposite direction.
    SharedOpposite,
}

/// Geometry of one zone shifted to a common local origin.
struct Local {
    zone: Zone,
    edges: Vec<(Point, Point)>,
}

impl Local {
    fn new(zone: &Zone, origin: Point) -> Self {
        let zone = Zone {
            zone_id: zone.zone_id.clone(),
            epoch_year: zone.epoch_year,
            parts: zone.parts.iter().map(|p| shift_part(p, origin)).collect(),
        };
        let edges = zone.rings().flat_map(|r| r.edges()).collect();
        Self { zone, edges }
    }

    fn classify(&self, p: Point, dir: Point, tol: f64) -> Side {
        for &(a, b) in &self.edges {
            let ab = b.sub(a);
            let len = dot(ab, ab).sqrt();
            if len == 0.0 {
                continue;
            }
            let dist = cross(ab, p.sub(a)).abs() / len;
            let t = dot(p.sub(a), ab) / (len * len);
            if dist <= tol && t > -tol / len && t < 1.0 + tol / len {
                return if dot(ab, dir) > 0.0 {
                    Side::SharedSame
                } else {
                    Side::SharedOpposite
                };
            }
        }
        if self.zone.contains(p) {
            Side::Inside
        } else {
            Side::Outside
        }
    }
}

/// Parameters along `p→q` at which it meets any edge in `others`.
fn cut_points(p: Point, q: Point, others: &[(Point, Point)], tol: f64) -> Vec<f64> {
    let pq = q.sub(p);
    let len2 = dot(pq, pq);
    let len = len2.sqrt();
    let mut cuts = vec![0.0, 1.0];
    for &(r, s) in others {
        let rs = s.sub(r);
        let denom = cross(pq, rs);
        let rs_len = dot(rs, rs).sqrt();
        if denom.abs() > 1e-14 * len * rs_len {
            let t = cross(r.sub(p), rs) / denom;
            let u = cross(r.sub(p), pq) / denom;
            let (tt, ut) = (tol / len, tol / rs_len.max(tol));
            if t > -tt && t < 1.0 + tt && u > -ut && u < 1.0 + ut {
                cuts.push(t.clamp(0.0, 1.0));
            }
        } else if cross(pq, r.sub(p)).abs() / len <= tol {
            // Collinear: the other edge's endpoints split this one.
            for e in [r, s] {
                let t = dot(e.sub(p), pq) / len2;
                if t > 0.0 && t < 1.0 {
                    cuts.push(t);
                }
            }
        }
    }
    cuts.sort_by(f64::total_cmp);
    cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-13);
    cuts
}

/// `½∮` contribution of the pieces of `from`'s boundary that bound the intersection.
fn boundary_contribution(from: &Local, other: &Local, tol: f64, own_shared: bool) -> f64 {
    let mut sum = 0.0;
    for &(p, q) in &from.edges {
        let cuts = cut_points(p, q, &other.edges, tol);
        let dir = q.sub(p);
        for w in cuts.windows(2) {
            if w[1] - w[0] <= 0.0 {
                continue;
            }
            let u = p.lerp(q, w[0]);
            let v = p.lerp(q, w[1]);
            let mid = p.lerp(q, 0.5 * (w[0] + w[1]));
            let keep = match other.classify(mid, dir, tol) {
                Side::Inside => true,
                Side::SharedSame => own_shared,
                Side::Outside | Side::SharedOpposite => false,
            };
            if keep {
                sum += cross(u, v);
            }
        }
    }
    0.5 * sum
}

/// Area of `a ∩ b`; 0 for disjoint zones.
pub fn intersection_area(a: &Zone, b: &Zone) -> Result<f64, ArealError> {
    let (ba, bb) = (a.bbox(), b.bbox());
    if !ba.overlaps(&bb) {
        return Ok(0.0);
    }
    let span = ba.union(&bb);
    let origin = span.min;
    let scale = (span.max.x - span.min.x).max(span.max.y - span.min.y);
    let tol = 1e-10 * scale;

    let la = Local::new(a, origin);
    let lb = Local::new(b, origin);
    let area = boundary_contribution(&la, &lb, tol, true) + boundary_contribution(&lb, &la, tol, false);

    let bound = polygon_area(a).min(polygon_area(b));
    let slack = 1e-9 * bound.max(scale * scale * 1e-6);
    if !area.is_finite() || area < -slack || area > bound + slack {
        return Err(ArealError::GeometryFailure {
            zone: format!("{} ∩ {}", a.zone_id, b.zone_id),
            detail: format!("intersection area {area} outside [0, {bound}]"),
        });
    }
    Ok(area.clamp(0.0, bound))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit_square() -> Zone {
        Zone::rect("sq", 1911, 0.0, 0.0, 1.0, 1.0).unwrap()
    }

    #[test]
    fn areas() {
        assert_eq!(polygon_area(&unit_square()), 1.0);
        let holed = Zone::new(
            "h",
            1911,
            vec![PolygonPart {
                outer: Ring::new(unit_square().parts[0].outer.points().to_vec()),
                holes: vec![Ring::new(vec![
                    Point::new(0.25, 0.25),
                    Point::new(0.75, 0.25),
                    Point::new(0.75, 0.75),
                    Point::new(0.25, 0.75),
                ])],
            }],
        )
        .unwrap();
        assert_eq!(polygon_area(&holed), 0.75);
        let tri = Zone::simple(
            "t",
            1911,
            vec![Point::new(0.0, 0.0), Point::new(4.0, 0.0), Point::new(0.0, 3.0)],
        )
        .unwrap();
        assert_eq!(polygon_area(&tri), 6.0);
    }

    #[test]
    fn degenerate_rings_are_rejected() {
        let line = Zone::simple(
            "l",
            1911,
            vec![Point::new(0.0, 0.0), Point::new(1.0, 0.0), Point::new(0.0, 0.0)],
        );
        assert!(matches!(line, Err(ArealError::DegenerateRing { .. })));
        let bowtie = Zone::simple(
            "b",
            1911,
            vec![
                Point::new(0.0, 0.0),
                Point::new(2.0, 2.0),
                Point::new(2.0, 0.0),
                Point::new(0.0, 1.0),
            ],
        );
        assert!(matches!(bowtie, Err(ArealError::GeometryFailure { .. })));
    }

    #[test]
    fn self_intersection_is_idempotent() {
        let sq = unit_square();
        assert_relative_eq!(intersection_area(&sq, &sq).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn disjoint_and_shifted_squares() {
        let sq = unit_square();
        let far = Zone::rect("far", 1911, 5.0, 5.0, 6.0, 6.0).unwrap();
        assert_eq!(intersection_area(&sq, &far).unwrap(), 0.0);
        let touching = Zone::rect("t", 1911, 1.0, 0.0, 2.0, 1.0).unwrap();
        assert_relative_eq!(intersection_area(&sq, &touching).unwrap(), 0.0, epsilon = 1e-12);
        let shifted = Zone::rect("s", 1911, 0.5, 0.0, 1.5, 1.0).unwrap();
        assert_relative_eq!(intersection_area(&sq, &shifted).unwrap(), 0.5, epsilon = 1e-12);
        assert_relative_eq!(intersection_area(&shifted, &sq).unwrap(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn concave_and_holed_overlap() {
        // L-shape covering [0,2]² minus [1,2]×[1,2].
        let ell = Zone::simple(
            "L",
            1911,
            vec![
                Point::new(0.0, 0.0),
                Point::new(2.0, 0.0),
                Point::new(2.0, 1.0),
                Point::new(1.0, 1.0),
                Point::new(1.0, 2.0),
                Point::new(0.0, 2.0),
            ],
        )
        .unwrap();
        let window = Zone::rect("w", 1911, 0.5, 0.5, 1.5, 1.5).unwrap();
        assert_relative_eq!(intersection_area(&ell, &window).unwrap(), 0.75, epsilon = 1e-12);

        let holed = Zone::new(
            "h",
            1911,
            vec![PolygonPart {
                outer: Ring::new(vec![
                    Point::new(0.0, 0.0),
                    Point::new(4.0, 0.0),
                    Point::new(4.0, 4.0),
                    Point::new(0.0, 4.0),
                ]),
                holes: vec![Ring::new(vec![
                    Point::new(1.0, 1.0),
                    Point::new(3.0, 1.0),
                    Point::new(3.0, 3.0),
                    Point::new(1.0, 3.0),
                ])],
            }],
        )
        .unwrap();
        let strip = Zone::rect("s", 1911, 0.0, 1.5, 4.0, 2.5).unwrap();
        // 4 wide strip minus the 2 wide hole, height 1.
        assert_relative_eq!(intersection_area(&holed, &strip).unwrap(), 2.0, epsilon = 1e-12);
        let inner = Zone::rect("i", 1911, 1.0, 1.0, 3.0, 3.0).unwrap();
        assert_relative_eq!(intersection_area(&holed, &inner).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn t_junction_shared_edges() {
        // Target split into two halves sharing edges with a source whose
        // boundary has vertices in the middle of the targets' edges.
        let source = Zone::simple(
            "src",
            1911,
            vec![
                Point::new(0.0, 0.0),
                Point::new(1.0, 0.0),
                Point::new(2.0, 0.0),
                Point::new(2.0, 1.0),
                Point::new(0.0, 1.0),
            ],
        )
        .unwrap();
        let left = Zone::rect("l", 1971, 0.0, 0.0, 0.5, 1.0).unwrap();
        let right = Zone::rect("r", 1971, 0.5, 0.0, 2.0, 1.0).unwrap();
        let a = intersection_area(&source, &left).unwrap();
        let b = intersection_area(&source, &right).unwrap();
        assert_relative_eq!(a, 0.5, epsilon = 1e-12);
        assert_relative_eq!(b, 1.5, epsilon = 1e-12);
    }
}
