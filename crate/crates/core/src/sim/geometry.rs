use serde::{Deserialize, Serialize};

pub type Vec2 = [f64; 2];

#[inline]
pub fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
pub fn dot(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

#[inline]
pub fn cross(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

#[inline]
pub fn norm(a: Vec2) -> f64 {
    a[0].hypot(a[1])
}

/// Wrap an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut x = a % two_pi;
    if x <= -std::f64::consts::PI {
        x += two_pi;
    } else if x > std::f64::consts::PI {
        x -= two_pi;
    }
    x
}

/// Polyline with cached cumulative arclength.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<Vec2>", into = "Vec<Vec2>")]
pub struct Polyline {
    points: Vec<Vec2>,
    cum: Vec<f64>,
}

impl From<Vec<Vec2>> for Polyline {
    fn from(points: Vec<Vec2>) -> Self {
        Polyline::new(points)
    }
}

impl From<Polyline> for Vec<Vec2> {
    fn from(p: Polyline) -> Self {
        p.points
    }
}

/// Result of projecting a point onto a polyline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub s: f64,
    pub d: f64,
    pub segment: usize,
    pub dist_sq: f64,
}

impl Polyline {
    pub fn new(points: Vec<Vec2>) -> Self {
        let mut cum = Vec::with_capacity(points.len());
        let mut acc = 0.0;
        for (i, p) in points.iter().enumerate() {
            if i > 0 {
                acc += norm(sub(*p, points[i - 1]));
            }
            cum.push(acc);
        }
        Self { points, cum }
    }

    pub fn points(&self) -> &[Vec2] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn length(&self) -> f64 {
        self.cum.last().copied().unwrap_or(0.0)
    }

    pub fn n_segments(&self) -> usize {
        self.points.len().saturating_sub(1)
    }

    fn segment_at(&self, s: f64) -> usize {
        let n = self.n_segments();
        match self.cum.binary_search_by(|c| c.partial_cmp(&s).unwrap()) {
            Ok(i) => i.min(n - 1),
            Err(i) => i.saturating_sub(1).min(n - 1),
        }
    }

    /// Point and tangent heading at arclength `s` (clamped to the curve).
    pub fn pose_at(&self, s: f64) -> (Vec2, f64) {
        let s = s.clamp(0.0, self.length());
        let i = self.segment_at(s);
        let a = self.points[i];
        let b = self.points[i + 1];
        let seg = sub(b, a);
        let l = norm(seg).max(1e-12);
        let t = ((s - self.cum[i]) / l).clamp(0.0, 1.0);
        ([a[0] + t * seg[0], a[1] + t * seg[1]], seg[1].atan2(seg[0]))
    }

    /// Point offset laterally by `d` (left positive) at arclength `s`.
    pub fn offset_point(&self, s: f64, d: f64) -> Vec2 {
        let (p, h) = self.pose_at(s);
        [p[0] - d * h.sin(), p[1] + d * h.cos()]
    }

    fn project_segment(&self, p: Vec2, i: usize) -> Projection {
        let a = self.points[i];
        let b = self.points[i + 1];
        let seg = sub(b, a);
        let l2 = dot(seg, seg).max(1e-24);
        let t = (dot(sub(p, a), seg) / l2).clamp(0.0, 1.0);
        let q = [a[0] + t * seg[0], a[1] + t * seg[1]];
        let r = sub(p, q);
        let l = l2.sqrt();
        // Signed lateral offset relative to the segment direction, left positive.
        let d = cross(seg, sub(p, a)) / l;
        let dist_sq = dot(r, r);
        let d = if t > 0.0 && t < 1.0 {
            d
        } else {
            // Beyond a segment end the nearest point is a vertex; keep the
            // segment's side sign with the true distance.
            d.signum() * dist_sq.sqrt()
        };
        Projection {
            s: self.cum[i] + t * l,
            d,
            segment: i,
            dist_sq,
        }
    }

    /// Nearest-point projection over segments `lo..hi`.
    pub fn project_range(&self, p: Vec2, lo: usize, hi: usize) -> Projection {
        let hi = hi.min(self.n_segments());
        let mut best = self.project_segment(p, lo.min(hi.saturating_sub(1)));
        for i in lo..hi {
            let pr = self.project_segment(p, i);
            if pr.dist_sq < best.dist_sq {
                best = pr;
            }
        }
        best
    }

    pub fn project(&self, p: Vec2) -> Projection {
        self.project_range(p, 0, self.n_segments())
    }

    /// Projection restricted to a window around a previous segment index, which
    /// keeps the Frenet frame continuous when the track bends back on itself.
    pub fn project_near(&self, p: Vec2, hint: usize, back: usize, ahead: usize) -> Projection {
        let lo = hint.saturating_sub(back);
        let hi = (hint + ahead + 1).min(self.n_segments());
        self.project_range(p, lo, hi)
    }
}

/// Frenet coordinates `(s, d)` of `position` w.r.t. `centerline`: arclength of
/// the nearest centerline point and signed lateral offset (left positive).
pub fn frenet_project(position: Vec2, centerline: &Polyline) -> (f64, f64) {
    assert!(centerline.len() >= 2, "centerline needs at least two points");
    let p = centerline.project(position);
    (p.s, p.d)
}

/// Smallest `t >= 0` with `|origin + t * dir - center| = radius`, for a unit
/// `dir`. Zero when the origin is inside the disc.
pub fn ray_disc(origin: Vec2, dir: Vec2, center: Vec2, radius: f64) -> Option<f64> {
    let oc = sub(origin, center);
    let c = dot(oc, oc) - radius * radius;
    if c <= 0.0 {
        return Some(0.0);
    }
    let b = dot(oc, dir);
    if b >= 0.0 {
        return None;
    }
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    Some(-b - disc.sqrt())
}
