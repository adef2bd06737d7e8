use super::Point2;

fn cross(o: Point2, a: Point2, b: Point2) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Convex hull by the monotone-chain method, counter-clockwise (in a y-up
/// frame), collinear points dropped. Two distinct inputs yield a segment,
/// one yields a single vertex.
pub fn convex_hull(points: &[Point2]) -> Vec<Point2> {
    let mut pts: Vec<Point2> = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() <= 2 {
        return pts;
    }
    let mut lower: Vec<Point2> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<Point2> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

fn segment_distance(p: Point2, a: Point2, b: Point2) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0)
    };
    (p.x - (a.x + t * dx)).hypot(p.y - (a.y + t * dy))
}

/// Convex polygon (possibly degenerate: a segment or a point).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvexPolygon {
    vertices: Vec<Point2>,
}

impl ConvexPolygon {
    pub fn hull_of(points: &[Point2]) -> Self {
        ConvexPolygon {
            vertices: convex_hull(points),
        }
    }

    pub fn vertices(&self) -> &[Point2] {
        &self.vertices
    }

    /// Applies `f` to every vertex. `f` must be an orientation-preserving
    /// similarity-like map (translation and positive axis scaling).
    pub fn mapped(&self, f: impl Fn(Point2) -> Point2) -> Self {
        ConvexPolygon {
            vertices: self.vertices.iter().map(|&p| f(p)).collect(),
        }
    }

    pub fn contains(&self, p: Point2) -> bool {
        match self.vertices.len() {
            0 => false,
            1 | 2 => self.distance(p) == 0.0,
            n => (0..n).all(|i| cross(self.vertices[i], self.vertices[(i + 1) % n], p) >= 0.0),
        }
    }

    /// Euclidean distance to the polygon; zero inside.
    pub fn distance(&self, p: Point2) -> f64 {
        let n = self.vertices.len();
        match n {
            0 => f64::INFINITY,
            1 => (p.x - self.vertices[0].x).hypot(p.y - self.vertices[0].y),
            2 => segment_distance(p, self.vertices[0], self.vertices[1]),
            _ => {
                if self.contains(p) {
                    return 0.0;
                }
                (0..n)
                    .map(|i| segment_distance(p, self.vertices[i], self.vertices[(i + 1) % n]))
                    .fold(f64::INFINITY, f64::min)
            }
        }
    }

    /// Distance from an interior point to the boundary; zero outside.
    pub fn depth(&self, p: Point2) -> f64 {
        let n = self.vertices.len();
        if n < 3 || !self.contains(p) {
            return 0.0;
        }
        (0..n)
            .map(|i| segment_distance(p, self.vertices[i], self.vertices[(i + 1) % n]))
            .fold(f64::INFINITY, f64::min)
    }

    /// Membership in the polygon dilated by a disc of radius `margin`.
    pub fn dilated_contains(&self, p: Point2, margin: f64) -> bool {
        self.distance(p) <= margin
    }

    /// `(min_x, min_y, max_x, max_y)` of the vertices.
    pub fn extent(&self) -> (f64, f64, f64, f64) {
        self.vertices.iter().fold(
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
            |(a, b, c, d), p| (a.min(p.x), b.min(p.y), c.max(p.x), d.max(p.y)),
        )
    }

    /// Binary mask over a `width x height` grid, sampling pixel centers.
    pub fn mask(&self, width: usize, height: usize, margin: f64) -> Vec<bool> {
        let mut out = vec![false; width * height];
        for y in 0..height {
            for x in 0..width {
                let c = Point2::new(x as f64 + 0.5, y as f64 + 0.5);
                out[y * width + x] = self.dilated_contains(c, margin);
            }
        }
        out
    }
}
