//! Piecewise-constant conductivity phantoms: ball and ellipsoid inclusions in
//! a unit background.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CgoError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum Shape {
    Ball { radius: f64 },
    /// Semi-axis lengths along the rows of `axes`.
    Ellipsoid { radii: [f64; 3], axes: [[f64; 3]; 3] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inclusion {
    #[serde(flatten)]
    pub shape: Shape,
    pub center: [f64; 3],
    pub value: f64,
}

impl Inclusion {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        match &self.shape {
            Shape::Ball { radius } => d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= radius * radius,
            Shape::Ellipsoid { radii, axes } => {
                let mut s = 0.0;
                for a in 0..3 {
                    let c = axes[a][0] * d[0] + axes[a][1] * d[1] + axes[a][2] * d[2];
                    s += (c / radii[a]).powi(2);
                }
                s <= 1.0
            }
        }
    }

    /// Largest distance from the origin to a point of the inclusion.
    pub fn extent(&self) -> f64 {
        let c = self.center;
        match &self.shape {
            Shape::Ball { radius } => (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt() + radius,
            Shape::Ellipsoid { radii, axes } => {
                // max over the surface of |c + Σ r_a u_a axes_a| with |u| = 1,
                // sampled densely then refined locally
                let eval = |th: f64, ph: f64| {
                    let u = [th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos()];
                    let mut x = c;
                    for a in 0..3 {
                        for i in 0..3 {
                            x[i] += radii[a] * u[a] * axes[a][i];
                        }
                    }
                    (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt()
                };
                let (mut best, mut bt, mut bp) = (0.0, 0.0, 0.0);
                let n = 90;
                for i in 0..=n {
                    for j in 0..2 * n {
                        let th = PI * i as f64 / n as f64;
                        let ph = PI * j as f64 / n as f64;
                        let v = eval(th, ph);
                        if v > best {
                            (best, bt, bp) = (v, th, ph);
                        }
                    }
                }
                let mut step = PI / n as f64;
                while step > 1e-10 {
                    let mut improved = false;
                    for (dt, dp) in [(step, 0.0), (-step, 0.0), (0.0, step), (0.0, -step)] {
                        let v = eval(bt + dt, bp + dp);
                        if v > best {
                            (best, bt, bp) = (v, bt + dt, bp + dp);
                            improved = true;
                        }
                    }
                    if !improved {
                        step /= 2.0;
                    }
                }
                best
            }
        }
    }
}

/// Inclusions over background 1, with declared boundary margin `rho` and
/// contrast bound `contrast`. Where inclusions overlap the first one wins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phantom {
    pub rho: f64,
    pub contrast: f64,
    #[serde(default, rename = "inclusion")]
    pub inclusions: Vec<Inclusion>,
}

impl Phantom {
    pub fn homogeneous() -> Self {
        Self {
            rho: 0.5,
            contrast: 1.0,
            inclusions: Vec::new(),
        }
    }

    pub fn new(rho: f64, contrast: f64, inclusions: Vec<Inclusion>) -> Result<Self> {
        let p = Self { rho, contrast, inclusions };
        p.validate()?;
        Ok(p)
    }

    /// Single centred ball of radius `r0` and conductivity `c`.
    pub fn centered_ball(r0: f64, c: f64) -> Result<Self> {
        Self::new(
            (1.0 - r0) / 2.0,
            c.max(1.0 / c),
            vec![Inclusion {
                shape: Shape::Ball { radius: r0 },
                center: [0.0; 3],
                value: c,
            }],
        )
    }

    /// Heart-lungs phantom: a conductive ball and two resistive spheroids.
    pub fn heart_lungs() -> Self {
        let a = 5.0 * PI / 12.0;
        let (s, c) = a.sin_cos();
        Self {
            rho: 0.15,
            contrast: 2.0,
            inclusions: vec![
                Inclusion {
                    shape: Shape::Ball { radius: 0.273 },
                    center: [-0.09, -0.55, 0.0],
                    value: 2.0,
                },
                Inclusion {
                    shape: Shape::Ellipsoid {
                        radii: [0.468, 0.234, 0.234],
                        axes: [[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]],
                    },
                    center: [-0.55 * s, 0.55 * c, 0.0],
                    value: 0.5,
                },
                Inclusion {
                    shape: Shape::Ellipsoid {
                        radii: [0.546, 0.273, 0.273],
                        axes: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
                    },
                    center: [0.45 * s, 0.45 * c, 0.0],
                    value: 0.5,
                },
            ],
        }
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "heart-lungs" | "heart_lungs" => Some(Self::heart_lungs()),
            "homogeneous" => Some(Self::homogeneous()),
            "layered-ball" | "layered_ball" => Self::centered_ball(0.5, 2.0).ok(),
            _ => None,
        }
    }

    /// `(r0, c)` when the phantom is one ball centred at the origin.
    pub fn as_centered_ball(&self) -> Option<(f64, f64)> {
        match self.inclusions.as_slice() {
            [Inclusion {
                shape: Shape::Ball { radius },
                center,
                value,
            }] if center.iter().all(|c| *c == 0.0) => Some((*radius, *value)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(CgoError::param(format!("rho must lie in (0, 1), got {}", self.rho)));
        }
        if !(self.contrast >= 1.0) {
            return Err(CgoError::param(format!("contrast bound must be at least 1, got {}", self.contrast)));
        }
        for (i, inc) in self.inclusions.iter().enumerate() {
            match &inc.shape {
                Shape::Ball { radius } => {
                    if !(*radius > 0.0) {
                        return Err(CgoError::param(format!("inclusion {i}: radius must be positive")));
                    }
                }
                Shape::Ellipsoid { radii, axes } => {
                    if radii.iter().any(|r| !(*r > 0.0)) {
                        return Err(CgoError::param(format!("inclusion {i}: radii must be positive")));
                    }
                    for a in 0..3 {
                        for b in 0..3 {
                            let d: f64 = (0..3).map(|k| axes[a][k] * axes[b][k]).sum();
                            let expect = if a == b { 1.0 } else { 0.0 };
                            if (d - expect).abs() > 1e-9 {
                                return Err(CgoError::param(format!("inclusion {i}: axes are not orthonormal")));
                            }
                        }
                    }
                }
            }
            if !(inc.value > 0.0) || inc.value > self.contrast * (1.0 + 1e-12) || inc.value * self.contrast < 1.0 - 1e-12 {
                return Err(CgoError::param(format!(
                    "inclusion {i}: value {} outside [1/{c}, {c}]",
                    inc.value,
                    c = self.contrast
                )));
            }
            let ext = inc.extent();
            if ext > 1.0 - self.rho + 1e-12 {
                return Err(CgoError::param(format!(
                    "inclusion {i} reaches radius {ext:.4}, beyond 1 - rho = {:.4}",
                    1.0 - self.rho
                )));
            }
        }
        Ok(())
    }

    pub fn conductivity(&self, p: [f64; 3]) -> f64 {
        self.inclusions.iter().find(|inc| inc.contains(p)).map_or(1.0, |inc| inc.value)
    }

    pub fn evaluate(&self, points: &[[f64; 3]]) -> Vec<f64> {
        points.iter().map(|p| self.conductivity(*p)).collect()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let p: Phantom = toml::from_str(text).map_err(|e| CgoError::Format {
            what: "phantom file",
            reason: e.to_string(),
        })?;
        p.validate()?;
        Ok(p)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("phantom serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CgoError::io(path, e))?;
        Self::from_toml_str(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heart_lungs_values() {
        let p = Phantom::heart_lungs();
        p.validate().unwrap();
        assert_eq!(p.conductivity([-0.09, -0.55, 0.0]), 2.0);
        assert_eq!(p.conductivity([0.0, 0.0, 0.99]), 1.0);
        let c = p.inclusions[1].center;
        assert_eq!(p.conductivity(c), 0.5);
        assert_eq!(p.conductivity(p.inclusions[2].center), 0.5);
        // ends of the long spheroid axes
        let a = 5.0 * PI / 12.0;
        let tip = [c[0] + 0.46 * a.cos(), c[1] + 0.46 * a.sin(), 0.0];
        assert_eq!(p.conductivity(tip), 0.5);
        let past = [c[0] + 0.47 * a.cos(), c[1] + 0.47 * a.sin(), 0.0];
        assert_eq!(p.conductivity(past), 1.0);
        let ext = p.inclusions.iter().map(|i| i.extent()).fold(0.0, f64::max);
        assert!(ext > 0.8 && ext < 0.85, "{ext}");
    }

    #[test]
    fn ellipsoid_extent_matches_closed_form() {
        // axis-aligned: farthest point along the long axis
        let inc = Inclusion {
            shape: Shape::Ellipsoid {
                radii: [0.3, 0.1, 0.1],
                axes: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            },
            center: [0.2, 0.0, 0.0],
            value: 2.0,
        };
        assert!((inc.extent() - 0.5).abs() < 1e-9);
    }

    #[test]
    fn validation_rejects_bad_phantoms() {
        assert!(Phantom::centered_ball(0.5, 2.0).is_ok());
        let mut p = Phantom::heart_lungs();
        p.rho = 0.3;
        assert!(p.validate().is_err());
        let mut p = Phantom::heart_lungs();
        p.inclusions[0].value = 3.0;
        assert!(p.validate().is_err());
        let mut p = Phantom::heart_lungs();
        if let Shape::Ellipsoid { axes, .. } = &mut p.inclusions[1].shape {
            axes[0][2] = 0.5;
        }
        assert!(p.validate().is_err());
    }

    #[test]
    fn toml_round_trip() {
        let p = Phantom::heart_lungs();
        let text = p.to_toml_string();
        let q = Phantom::from_toml_str(&text).unwrap();
        assert_eq!(p, q);
        assert!(Phantom::from_toml_str("rho = 0.1\ncontrast = 2\n[[inclusion]]\nshape = \"cube\"\ncenter=[0,0,0]\nvalue=1\n").is_err());
    }

    #[test]
    fn bundled_file_matches_builtin() {
        let text = include_str!("../data/heart_lungs.toml");
        let p = Phantom::from_toml_str(text).unwrap();
        let q = Phantom::heart_lungs();
        assert_eq!(p.inclusions.len(), 3);
        for (a, b) in p.inclusions.iter().zip(&q.inclusions) {
            assert_eq!(a.value, b.value);
            for i in 0..3 {
                assert!((a.center[i] - b.center[i]).abs() < 1e-12);
            }
        }
        let pts: Vec<[f64; 3]> = (0..2000)
            .map(|i| {
                let t = i as f64;
                [0.9 * (t * 0.731).sin(), 0.9 * (t * 0.377).cos(), 0.3 * (t * 0.113).sin()]
            })
            .collect();
        assert_eq!(p.evaluate(&pts), q.evaluate(&pts));
    }
}
