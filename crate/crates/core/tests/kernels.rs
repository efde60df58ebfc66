//! Sensitivity kernels of single pairs in simple media.

use w2fwi::adjoint::{adjoint_kernel, build_adjoint_sources, gradient_mask, SensitivityKernel};
use w2fwi::grid::{Grid2D, VelocityModel};
use w2fwi::picking::{make_window, WindowPolicy};
use w2fwi::scaling::{MisfitKind, ScalingOperator};
use w2fwi::wave::{solve_forward, ReceiverSpec, SolverConfig, SourceSpec, TimeAxis, WaveSolver};

const F0: f64 = 4.0;
const SRC: (f64, f64) = (2.0, 4.0);
const REC: (f64, f64) = (10.0, 4.0);

fn grid() -> Grid2D {
    Grid2D::covering(12.0, 8.0, 0.1).unwrap()
}

fn config() -> SolverConfig {
    SolverConfig {
        pml_velocity: Some(6.2),
        ..SolverConfig::default()
    }
}

/// Kernel of the single pair for `model` against data from `truth`.
fn pair_kernel(model: &VelocityModel, truth: &VelocityModel, kind: MisfitKind) -> (f64, SensitivityKernel) {
    let axis = TimeAxis::new(2.5, 0.005).unwrap();
    let src = SourceSpec::new(SRC.0, SRC.1, F0);
    let rec = ReceiverSpec { x: REC.0, z: REC.1 };
    let obs_solver = WaveSolver::new(truth, &config(), axis).unwrap();
    let (obs, _) = solve_forward(&obs_solver, 0, &src, &[rec], false).unwrap();
    let solver = WaveSolver::new(model, &config(), axis).unwrap();
    let (syn, field) = solve_forward(&solver, 0, &src, &[rec], true).unwrap();
    let t_dir = (REC.0 - SRC.0).hypot(REC.1 - SRC.1) / 5.8;
    let window = make_window(0, 0, src.peak_time() + t_dir, F0, axis.t_final(), &WindowPolicy::default());
    assert!(window.accepted());
    let op = ScalingOperator::new(kind, 1e-3).unwrap();
    let set = build_adjoint_sources(&op, 0, &[window], &syn, &obs).unwrap();
    let inj: Vec<_> = set.series.iter().map(|(_, q)| (rec, q)).collect();
    let kernel = adjoint_kernel(&solver, &field.unwrap(), &inj).unwrap();
    (set.misfit(), kernel)
}

fn mask(g: &Grid2D) -> Vec<f64> {
    let src = SourceSpec::new(SRC.0, SRC.1, F0);
    gradient_mask(g, &[src], &[ReceiverSpec { x: REC.0, z: REC.1 }], 3, 3.0)
}

fn distance_to_ray(x: f64, z: f64) -> f64 {
    let (dx, dz) = (REC.0 - SRC.0, REC.1 - SRC.1);
    let w = (((x - SRC.0) * dx + (z - SRC.1) * dz) / (dx * dx + dz * dz)).clamp(0.0, 1.0);
    (x - SRC.0 - w * dx).hypot(z - SRC.1 - w * dz)
}

#[test]
fn homogeneous_kernel_stays_in_the_fresnel_zone() {
    let g = grid();
    let model = VelocityModel::uniform(g, 5.8).unwrap();
    let truth = VelocityModel::uniform(g, 5.8 * 1.01).unwrap();
    let (chi, k) = pair_kernel(&model, &truth, MisfitKind::W2P3);
    assert!(chi > 0.0);
    let lambda = 5.8 / F0;
    let length = (REC.0 - SRC.0).hypot(REC.1 - SRC.1);
    let half_width = 0.5 * (lambda * length).sqrt();
    let m = mask(&g);
    let (mut inside, mut total) = (0.0, 0.0);
    for ((ix, iz, x, z), w) in g.nodes().zip(&m) {
        let v = k.values[g.index(ix, iz)].abs() * w;
        total += v;
        if distance_to_ray(x, z) <= half_width {
            inside += v;
        }
    }
    let fraction = inside / total;
    assert!(fraction >= 0.9, "fraction inside the Fresnel zone {fraction}");
}

/// Fast box over the middle of the ray.
fn anomalous(g: Grid2D) -> VelocityModel {
    VelocityModel::from_fn(g, |x, z| {
        if (5.0..=7.0).contains(&x) && (3.0..=5.0).contains(&z) {
            5.8 * 1.05
        } else {
            5.8
        }
    })
    .unwrap()
}

#[test]
fn kernel_points_towards_the_true_anomaly() {
    let g = grid();
    let model = VelocityModel::uniform(g, 5.8).unwrap();
    let truth = anomalous(g);
    for kind in [MisfitKind::W2P1, MisfitKind::W2P3, MisfitKind::L2] {
        let (_, k) = pair_kernel(&model, &truth, kind);
        let m = mask(&g);
        let dot: f64 = k
            .values
            .iter()
            .zip(truth.values().iter().zip(model.values()))
            .zip(&m)
            .map(|((kv, (t, c)), w)| kv * (t - c) * w)
            .sum();
        assert!(dot < 0.0, "{kind}: <K, c_T - c_0> = {dot}");
    }
}

#[test]
fn kernel_vanishes_at_the_true_model() {
    let g = grid();
    let start = VelocityModel::uniform(g, 5.8).unwrap();
    let truth = anomalous(g);
    let (_, typical) = pair_kernel(&start, &truth, MisfitKind::W2P3);
    let (chi, k) = pair_kernel(&truth, &truth, MisfitKind::W2P3);
    assert_eq!(chi, 0.0);
    assert!(k.norm() <= 1e-8 * typical.norm());
}
