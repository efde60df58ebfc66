//! Piecewise-constant layered velocity models: the two-layer crust/mantle
//! model with a crustal anomaly and the three-layer crustal-root model.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grid::{Grid2D, VelocityModel};

/// Inclusive comparisons on layer boundaries use this slack (km) so that
/// nodes placed exactly on an interface by floating point land on the intended side.
const EDGE_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anomaly {
    pub x_min: f64,
    pub x_max: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub velocity: f64,
}

impl Anomaly {
    fn contains(&self, x: f64, z: f64) -> bool {
        x >= self.x_min - EDGE_TOL
            && x <= self.x_max + EDGE_TOL
            && z >= self.z_min - EDGE_TOL
            && z <= self.z_max + EDGE_TOL
    }
}

/// Moho deepening `L(x) = depth + amplitude * (x / x_end)^2` for `x <= x_end`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MohoRoot {
    pub x_end: f64,
    pub amplitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayeredModel {
    TwoLayer {
        moho_depth: f64,
        crust: f64,
        mantle: f64,
        anomaly: Option<Anomaly>,
    },
    CrustalRoot {
        conrad_depth: f64,
        moho_depth: f64,
        upper_crust: f64,
        lower_crust: f64,
        mantle: f64,
        root: Option<MohoRoot>,
    },
}

impl LayeredModel {
    /// Two-layer model on `[0, 80] x [0, 60]` km, optionally with the +15 % crustal anomaly.
    pub fn two_layer(anomaly: bool) -> Self {
        LayeredModel::TwoLayer {
            moho_depth: 30.0,
            crust: 5.8,
            mantle: 8.1,
            anomaly: anomaly.then_some(Anomaly {
                x_min: 35.0,
                x_max: 45.0,
                z_min: 10.0,
                z_max: 20.0,
                velocity: 6.67,
            }),
        }
    }

    /// Crustal-root model on `[0, 80] x [0, 80]` km; with `root` off the Moho is flat at 36 km.
    pub fn crustal_root(root: bool) -> Self {
        LayeredModel::CrustalRoot {
            conrad_depth: 20.0,
            moho_depth: 36.0,
            upper_crust: 5.8,
            lower_crust: 6.5,
            mantle: 8.04,
            root: root.then_some(MohoRoot {
                x_end: 40.0,
                amplitude: 25.0,
            }),
        }
    }

    pub fn velocity(&self, x: f64, z: f64) -> f64 {
        match self {
            LayeredModel::TwoLayer {
                moho_depth,
                crust,
                mantle,
                anomaly,
            } => {
                if let Some(a) = anomaly {
                    if a.contains(x, z) {
                        return a.velocity;
                    }
                }
                if z <= moho_depth + EDGE_TOL {
                    *crust
                } else {
                    *mantle
                }
            }
            LayeredModel::CrustalRoot {
                conrad_depth,
                upper_crust,
                lower_crust,
                mantle,
                ..
            } => {
                if z <= conrad_depth + EDGE_TOL {
                    *upper_crust
                } else if z <= self.moho_at(x) + EDGE_TOL {
                    *lower_crust
                } else {
                    *mantle
                }
            }
        }
    }

    /// Moho depth below `x` (constant for the two-layer model).
    pub fn moho_at(&self, x: f64) -> f64 {
        match self {
            LayeredModel::TwoLayer { moho_depth, .. } => *moho_depth,
            LayeredModel::CrustalRoot {
                moho_depth, root, ..
            } => match root {
                Some(r) if x <= r.x_end + EDGE_TOL => {
                    let s = x / r.x_end;
                    moho_depth + r.amplitude * s * s
                }
                _ => *moho_depth,
            },
        }
    }

    /// Depths of the horizontal discontinuities (used for reflection estimates).
    pub fn horizontal_interfaces(&self) -> Vec<f64> {
        match self {
            LayeredModel::TwoLayer { moho_depth, .. } => vec![*moho_depth],
            LayeredModel::CrustalRoot {
                conrad_depth,
                moho_depth,
                root,
                ..
            } => {
                if root.is_none() {
                    vec![*conrad_depth, *moho_depth]
                } else {
                    vec![*conrad_depth]
                }
            }
        }
    }

    /// Lower boundary of the crust (where earthquakes are placed).
    pub fn crust_bottom(&self) -> f64 {
        match self {
            LayeredModel::TwoLayer { moho_depth, .. } => *moho_depth,
            LayeredModel::CrustalRoot { moho_depth, .. } => *moho_depth,
        }
    }

    /// Same model with every length multiplied by `s` (velocities unchanged).
    pub fn scaled(&self, s: f64) -> Self {
        match self.clone() {
            LayeredModel::TwoLayer {
                moho_depth,
                crust,
                mantle,
                anomaly,
            } => LayeredModel::TwoLayer {
                moho_depth: moho_depth * s,
                crust,
                mantle,
                anomaly: anomaly.map(|a| Anomaly {
                    x_min: a.x_min * s,
                    x_max: a.x_max * s,
                    z_min: a.z_min * s,
                    z_max: a.z_max * s,
                    velocity: a.velocity,
                }),
            },
            LayeredModel::CrustalRoot {
                conrad_depth,
                moho_depth,
                upper_crust,
                lower_crust,
                mantle,
                root,
            } => LayeredModel::CrustalRoot {
                conrad_depth: conrad_depth * s,
                moho_depth: moho_depth * s,
                upper_crust,
                lower_crust,
                mantle,
                root: root.map(|r| MohoRoot {
                    x_end: r.x_end * s,
                    amplitude: r.amplitude * s,
                }),
            },
        }
    }

    /// Pointwise sampling at grid nodes (no smoothing across discontinuities).
    pub fn sample(&self, grid: &Grid2D) -> Result<VelocityModel> {
        VelocityModel::from_fn(*grid, |x, z| self.velocity(x, z))
    }
}

/// The two-layer model sampled on `grid`.
pub fn build_two_layer_model(anomaly: bool, grid: &Grid2D) -> Result<VelocityModel> {
    LayeredModel::two_layer(anomaly).sample(grid)
}

/// The crustal-root model sampled on `grid`.
pub fn build_crustal_root_model(root: bool, grid: &Grid2D) -> Result<VelocityModel> {
    LayeredModel::crustal_root(root).sample(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_layer_probes() {
        let g = Grid2D::covering(80.0, 60.0, 0.2).unwrap();
        let on = build_two_layer_model(true, &g).unwrap();
        let off = build_two_layer_model(false, &g).unwrap();
        assert_eq!(on.nearest(40.0, 15.0), 6.67);
        assert_eq!(off.nearest(40.0, 15.0), 5.8);
        assert_eq!(on.nearest(40.0, 45.0), 8.1);
        assert_eq!(on.nearest(35.0, 10.0), 6.67);
        assert_eq!(on.nearest(34.8, 10.0), 5.8);
        assert_eq!(on.nearest(10.0, 30.0), 5.8);
        assert_eq!(on.nearest(10.0, 30.2), 8.1);
    }

    #[test]
    fn crustal_root_probes() {
        let root = LayeredModel::crustal_root(true);
        let flat = LayeredModel::crustal_root(false);
        assert_eq!(root.moho_at(0.0), 36.0);
        assert!((root.moho_at(40.0) - 61.0).abs() < 1e-12);
        assert!((root.moho_at(20.0) - 42.25).abs() < 1e-12);
        assert_eq!(root.moho_at(60.0), 36.0);
        assert_eq!(root.velocity(0.0, 40.0), 8.04);
        assert_eq!(root.velocity(20.0, 40.0), 6.5);
        assert_eq!(flat.velocity(20.0, 40.0), 8.04);
        assert_eq!(root.velocity(20.0, 10.0), 5.8);
    }

    #[test]
    fn builders_are_pure_and_positive() {
        let g = Grid2D::covering(80.0, 80.0, 0.4).unwrap();
        let a = build_crustal_root_model(true, &g).unwrap();
        let b = build_crustal_root_model(true, &g).unwrap();
        assert_eq!(a, b);
        assert!(a.min() > 0.0);
    }

    #[test]
    fn scaling_moves_interfaces() {
        let m = LayeredModel::two_layer(true).scaled(0.25);
        assert_eq!(m.velocity(10.0, 3.75), 6.67);
        assert_eq!(m.velocity(10.0, 7.6), 8.1);
        assert_eq!(m.horizontal_interfaces(), vec![7.5]);
    }
}
