//! Perforation geometries on the unit square.
//!
//! A [`PerforationSet`] describes the perforated region `B` inside
//! `Omega = (0,1)^2`; the perforated domain is `Omega \ closure(B)`. Sets are
//! immutable after construction and classified pointwise through
//! [`PerforationSet::is_perforated`]. Points on the boundary of a perforation
//! count as perforated: the solvers force the solution to zero on the closed
//! perforation set.

use crate::error::{Error, Result};
use crate::rng::Lcg64;

/// A point of the ambient domain `[0,1]^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }
}

/// Axis-aligned rectangle, stored closed.
#[derive(Debug, Clone, Copy)]
pub struct Rect {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Rect {
    pub fn contains(&self, p: Point2) -> bool {
        p.x >= self.x_min && p.x <= self.x_max && p.y >= self.y_min && p.y <= self.y_max
    }
}

#[derive(Debug, Clone)]
enum Kind {
    /// Discs of radius `radius_ratio * eps` centered at
    /// `((k + 0.5) + shift) * eps` for all integer pairs `k` whose center
    /// falls in the closed unit square. Discs centered outside are dropped;
    /// boundary-centered discs stay and are clipped by the domain itself.
    PeriodicDiscs { eps: f64, radius_ratio: f64, shift: (f64, f64) },
    /// Explicit rectangle list (random generation caches the list here).
    Rects(Vec<Rect>),
    /// Disjoint increasing segments `(a_j, b_j)` on `(0,1)`; membership only
    /// looks at the x coordinate.
    Segments1D(Vec<(f64, f64)>),
}

/// An evaluable description of the perforation set.
#[derive(Debug, Clone)]
pub struct PerforationSet {
    kind: Kind,
    tag: String,
}

impl PerforationSet {
    /// The empty set: no perforations, the domain is all of `Omega`.
    pub fn none() -> Self {
        PerforationSet { kind: Kind::Rects(Vec::new()), tag: "none".to_string() }
    }

    /// Periodic discs of radius `radius_ratio * eps` on the grid of period
    /// `eps`, optionally shifted by `shift * eps`.
    pub fn periodic_discs(eps: f64, radius_ratio: f64, shift: (f64, f64)) -> Result<Self> {
        if !(eps > 0.0) || !eps.is_finite() {
            return Err(Error::InvalidParameter(format!("eps must be positive, got {eps}")));
        }
        if !(radius_ratio > 0.0 && radius_ratio < 0.5) {
            return Err(Error::InvalidParameter(format!(
                "radius_ratio must lie in (0, 0.5), got {radius_ratio}"
            )));
        }
        if !shift.0.is_finite() || !shift.1.is_finite() {
            return Err(Error::InvalidParameter("shift must be finite".to_string()));
        }
        let tag = if shift == (0.0, 0.0) {
            format!("periodic:eps={eps},ratio={radius_ratio}")
        } else {
            format!("periodic:eps={eps},ratio={radius_ratio},shift={},{}", shift.0, shift.1)
        };
        Ok(PerforationSet { kind: Kind::PeriodicDiscs { eps, radius_ratio, shift }, tag })
    }

    /// `count` axis-aligned rectangles with centers uniform in the unit
    /// square and widths/heights uniform in the given ranges. Deterministic
    /// for a fixed seed; per rectangle the draws are `cx, cy, w, h` in that
    /// order from the shared [`Lcg64`] stream.
    pub fn random_rects(
        count: usize,
        w_range: (f64, f64),
        h_range: (f64, f64),
        seed: u64,
    ) -> Result<Self> {
        for (lo, hi) in [w_range, h_range] {
            if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "size range must satisfy 0 < lo <= hi, got ({lo}, {hi})"
                )));
            }
        }
        let mut rng = Lcg64::new(seed);
        let mut rects = Vec::with_capacity(count);
        for _ in 0..count {
            let cx = rng.next_f64();
            let cy = rng.next_f64();
            let w = rng.uniform(w_range.0, w_range.1);
            let h = rng.uniform(h_range.0, h_range.1);
            rects.push(Rect {
                x_min: cx - 0.5 * w,
                x_max: cx + 0.5 * w,
                y_min: cy - 0.5 * h,
                y_max: cy + 0.5 * h,
            });
        }
        let tag = format!(
            "rects:count={count},w={}..{},h={}..{},seed={seed}",
            w_range.0, w_range.1, h_range.0, h_range.1
        );
        Ok(PerforationSet { kind: Kind::Rects(rects), tag })
    }

    /// Explicit rectangle list.
    pub fn from_rects(rects: Vec<Rect>) -> Self {
        let tag = format!("rects:explicit,count={}", rects.len());
        PerforationSet { kind: Kind::Rects(rects), tag }
    }

    /// Disjoint increasing segments on `(0,1)` for one-dimensional runs.
    pub fn segments_1d(segments: Vec<(f64, f64)>) -> Result<Self> {
        let mut prev = 0.0;
        for &(a, b) in &segments {
            if !(a > prev && b > a && b < 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "segments must satisfy 0 < a_1 < b_1 < a_2 < ... < 1, got ({a}, {b}) after {prev}"
                )));
            }
            prev = b;
        }
        let tag = format!("segments:count={}", segments.len());
        Ok(PerforationSet { kind: Kind::Segments1D(segments), tag })
    }

    /// Short descriptor used in report rows.
    pub fn tag(&self) -> &str {
        &self.tag
    }

    /// True iff `p` lies in the closed perforation set.
    pub fn is_perforated(&self, p: Point2) -> bool {
        match &self.kind {
            Kind::PeriodicDiscs { eps, radius_ratio, shift } => {
                let r = radius_ratio * eps;
                let kx = (p.x / eps - 0.5 - shift.0).round() as i64;
                let ky = (p.y / eps - 0.5 - shift.1).round() as i64;
                for dx in -1..=1 {
                    for dy in -1..=1 {
                        let cx = (kx + dx) as f64 + 0.5 + shift.0;
                        let cy = (ky + dy) as f64 + 0.5 + shift.1;
                        let (cx, cy) = (cx * eps, cy * eps);
                        // Centers outside the closed unit square are dropped.
                        if !(0.0..=1.0).contains(&cx) || !(0.0..=1.0).contains(&cy) {
                            continue;
                        }
                        let (ddx, ddy) = (p.x - cx, p.y - cy);
                        if ddx * ddx + ddy * ddy <= r * r {
                            return true;
                        }
                    }
                }
                false
            }
            Kind::Rects(rects) => rects.iter().any(|rect| rect.contains(p)),
            Kind::Segments1D(segments) => segments.iter().any(|&(a, b)| p.x >= a && p.x <= b),
        }
    }

    /// Disc centers retained inside the closed unit square (periodic kind
    /// only).
    pub fn disc_centers(&self) -> Vec<Point2> {
        match &self.kind {
            Kind::PeriodicDiscs { eps, shift, .. } => {
                let mut centers = Vec::new();
                let max_k = (1.0 / eps).ceil() as i64 + 2;
                for kx in -2..max_k {
                    for ky in -2..max_k {
                        let cx = (kx as f64 + 0.5 + shift.0) * eps;
                        let cy = (ky as f64 + 0.5 + shift.1) * eps;
                        if (0.0..=1.0).contains(&cx) && (0.0..=1.0).contains(&cy) {
                            centers.push(Point2::new(cx, cy));
                        }
                    }
                }
                centers
            }
            _ => Vec::new(),
        }
    }

    /// Rectangle list (rect kinds only).
    pub fn rects(&self) -> &[Rect] {
        match &self.kind {
            Kind::Rects(rects) => rects,
            _ => &[],
        }
    }

    /// Segment list (1D kind only).
    pub fn segments(&self) -> &[(f64, f64)] {
        match &self.kind {
            Kind::Segments1D(segments) => segments,
            _ => &[],
        }
    }

    pub fn is_empty(&self) -> bool {
        match &self.kind {
            Kind::PeriodicDiscs { .. } => false,
            Kind::Rects(rects) => rects.is_empty(),
            Kind::Segments1D(segments) => segments.is_empty(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disc_center_counts() {
        // (k + 0.5) * 0.03 < 1 holds for k = 0..=32, hence 33 x 33 centers.
        let set = PerforationSet::periodic_discs(0.03, 0.35, (0.0, 0.0)).unwrap();
        assert_eq!(set.disc_centers().len(), 1089);

        let set = PerforationSet::periodic_discs(0.1, 0.2, (0.0, 0.0)).unwrap();
        assert_eq!(set.disc_centers().len(), 100);
    }

    #[test]
    fn shifted_centers_are_perforated() {
        let set = PerforationSet::periodic_discs(0.1, 0.2, (0.5, 0.5)).unwrap();
        // Shift eps/2 moves centers to the eps-grid points.
        assert!(set.is_perforated(Point2::new(0.1, 0.3)));
        assert!(set.is_perforated(Point2::new(0.5, 0.5)));
        assert!(!set.is_perforated(Point2::new(0.15, 0.35)));
    }

    #[test]
    fn disc_centers_are_members() {
        let set = PerforationSet::periodic_discs(0.03, 0.35, (0.0, 0.0)).unwrap();
        for c in set.disc_centers() {
            assert!(set.is_perforated(c));
        }
        let set = PerforationSet::periodic_discs(0.25, 0.3, (0.0, 0.0)).unwrap();
        assert!(set.is_perforated(Point2::new(0.5 * 0.25, 0.5 * 0.25)));
    }

    #[test]
    fn empty_set_never_perforated() {
        let set = PerforationSet::none();
        assert!(!set.is_perforated(Point2::new(0.5, 0.5)));
        assert!(set.is_empty());
        let set = PerforationSet::random_rects(0, (0.01, 0.02), (0.01, 0.02), 1).unwrap();
        assert!(set.is_empty());
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(PerforationSet::periodic_discs(0.1, 0.5, (0.0, 0.0)).is_err());
        assert!(PerforationSet::periodic_discs(0.1, 0.0, (0.0, 0.0)).is_err());
        assert!(PerforationSet::periodic_discs(0.0, 0.3, (0.0, 0.0)).is_err());
        assert!(PerforationSet::random_rects(3, (0.0, 0.1), (0.01, 0.02), 1).is_err());
        assert!(PerforationSet::segments_1d(vec![(0.3, 0.2)]).is_err());
        assert!(PerforationSet::segments_1d(vec![(0.1, 0.2), (0.15, 0.3)]).is_err());
    }

    #[test]
    fn random_rects_deterministic_across_runs() {
        let a = PerforationSet::random_rects(100, (0.02, 0.05), (0.02, 0.05), 1).unwrap();
        let b = PerforationSet::random_rects(100, (0.02, 0.05), (0.02, 0.05), 1).unwrap();
        assert_eq!(a.rects().len(), 100);
        let mut rng = Lcg64::new(99);
        for _ in 0..10_000 {
            let p = Point2::new(rng.next_f64(), rng.next_f64());
            assert_eq!(a.is_perforated(p), b.is_perforated(p));
        }
        let c = PerforationSet::random_rects(100, (0.02, 0.05), (0.02, 0.05), 2).unwrap();
        let mut differs = false;
        for _ in 0..10_000 {
            let p = Point2::new(rng.next_f64(), rng.next_f64());
            differs |= a.is_perforated(p) != c.is_perforated(p);
        }
        assert!(differs, "different seeds should give different geometries");
    }

    #[test]
    fn unshifted_membership_is_periodic() {
        let eps = 0.1;
        let set = PerforationSet::periodic_discs(eps, 0.35, (0.0, 0.0)).unwrap();
        let mut rng = Lcg64::new(5);
        for _ in 0..20_000 {
            let p = Point2::new(rng.uniform(0.0, 1.0 - eps), rng.next_f64());
            let q = Point2::new(p.x + eps, p.y);
            assert_eq!(set.is_perforated(p), set.is_perforated(q));
        }
    }

    #[test]
    fn monte_carlo_volume_fraction() {
        let eps = 0.1;
        let ratio = 0.35;
        let set = PerforationSet::periodic_discs(eps, ratio, (0.0, 0.0)).unwrap();
        let mut rng = Lcg64::new(11);
        let mut hits = 0usize;
        let n = 1_000_000usize;
        for _ in 0..n {
            // Interior cells only, away from domain-boundary clipping.
            let p = Point2::new(rng.uniform(eps, 1.0 - eps), rng.uniform(eps, 1.0 - eps));
            if set.is_perforated(p) {
                hits += 1;
            }
        }
        let measured = hits as f64 / n as f64;
        let expected = std::f64::consts::PI * ratio * ratio;
        assert!(
            (measured - expected).abs() / expected < 0.02,
            "volume fraction {measured} vs expected {expected}"
        );
    }
}
