use w2fwi::grid::{Grid2D, VelocityModel};
use w2fwi::models::LayeredModel;
use w2fwi::wave::*;

fn homogeneous(w: f64, d: f64, h: f64, c: f64) -> VelocityModel {
    VelocityModel::uniform(Grid2D::covering(w, d, h).unwrap(), c).unwrap()
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let n: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    d / n
}

fn desk_two_layer() -> VelocityModel {
    let g = Grid2D::covering(20.0, 15.0, 0.1).unwrap();
    LayeredModel::two_layer(true).scaled(0.25).sample(&g).unwrap()
}

#[test]
fn reciprocity_in_layered_model() {
    let m = desk_two_layer();
    let axis = TimeAxis::new(5.0, 0.005).unwrap();
    let s = WaveSolver::new(&m, &SolverConfig::default(), axis).unwrap();
    let a = (4.13, 6.27);
    let b = (15.5, 0.6);
    let (ab, _) = solve_forward(&s, 0, &SourceSpec::new(a.0, a.1, 4.0), &[ReceiverSpec { x: b.0, z: b.1 }], false).unwrap();
    let (ba, _) = solve_forward(&s, 0, &SourceSpec::new(b.0, b.1, 4.0), &[ReceiverSpec { x: a.0, z: a.1 }], false).unwrap();
    let r = rel_diff(&ab[0].samples, &ba[0].samples);
    println!("reciprocity mismatch {r:.3e}");
    assert!(r < 1e-8);
}

#[test]
fn adjoint_field_is_time_reversed_forward_field() {
    let m = desk_two_layer();
    let axis = TimeAxis::new(2.0, 0.005).unwrap();
    let s = WaveSolver::new(&m, &SolverConfig::default(), axis).unwrap();
    let at = ReceiverSpec { x: 7.3, z: 2.2 };
    let n = axis.steps();
    let src = SourceSpec::new(at.x, at.z, 4.0);
    let mut qs: Vec<f64> = (0..axis.nt).map(|k| src.wavelet(axis.t_final() - axis.time(k))).collect();
    qs[0] = 0.0;
    qs[n] = 0.0;
    let q = Trace::new(0, 0, axis.dt, qs.clone());
    let w = solve_with_adjoint_sources(&s, &[(at, &q)]).unwrap();
    let reversed: Vec<f64> = (0..axis.nt).map(|k| qs[n - k]).collect();
    let st = s.stencil(at.x, at.z).unwrap();
    let (_, fwd) = s.run(&[(&st, &reversed)], &[], true, false).unwrap();
    let fwd = fwd.unwrap();
    let len = w.frame_len();
    let (mut a, mut b) = (vec![0.0; len], vec![0.0; len]);
    let mut worst: f64 = 0.0;
    for k in (0..=n).step_by(37) {
        w.frame_at(n - k, &mut a);
        fwd.frame_at(k, &mut b);
        let scale = max_abs(&b).max(1e-300);
        let d = a.iter().zip(&b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        if max_abs(&b) > 0.0 {
            worst = worst.max(d / scale);
        }
    }
    println!("adjoint vs reversed forward {worst:.3e}");
    assert!(worst < 1e-10);
}

#[test]
fn zero_injection_gives_zero_field() {
    let s = WaveSolver::new(&homogeneous(4.0, 4.0, 0.1, 3.0), &SolverConfig::default(), TimeAxis::new(0.5, 0.005).unwrap()).unwrap();
    let q = Trace::zeros(0, 0, s.time());
    let w = solve_with_adjoint_sources(&s, &[(ReceiverSpec { x: 2.0, z: 2.0 }, &q)]).unwrap();
    assert_eq!(w.max_abs(), 0.0);
}

#[test]
fn linearity_and_determinism() {
    let m = desk_two_layer();
    let axis = TimeAxis::new(3.0, 0.005).unwrap();
    let s = WaveSolver::new(&m, &SolverConfig::default(), axis).unwrap();
    let sa = s.stencil(5.0, 4.0).unwrap();
    let sb = s.stencil(12.0, 3.0).unwrap();
    let rec = vec![s.stencil(9.0, 0.6).unwrap(), s.stencil(14.0, 1.0).unwrap()];
    let f: Vec<f64> = (0..axis.nt).map(|k| ricker(axis.time(k) - 0.4, 4.0, 1.0)).collect();
    let g: Vec<f64> = (0..axis.nt).map(|k| ricker(axis.time(k) - 0.7, 3.0, 1.0)).collect();
    let (alpha, beta) = (1.7, -0.6);
    let fg_a: Vec<f64> = f.iter().map(|v| alpha * v).collect();
    let fg_b: Vec<f64> = g.iter().map(|v| beta * v).collect();
    let (both, _) = s.run(&[(&sa, &fg_a), (&sb, &fg_b)], &rec, false, false).unwrap();
    let (rf, _) = s.run(&[(&sa, &f)], &rec, false, false).unwrap();
    let (rg, _) = s.run(&[(&sb, &g)], &rec, false, false).unwrap();
    for j in 0..2 {
        let comb: Vec<f64> = rf[j].iter().zip(&rg[j]).map(|(x, y)| alpha * x + beta * y).collect();
        assert!(rel_diff(&both[j], &comb) < 1e-12);
    }
    let (again, _) = s.run(&[(&sa, &fg_a), (&sb, &fg_b)], &rec, false, false).unwrap();
    assert_eq!(both, again);
}

#[test]
fn energy_does_not_grow_after_source_shuts_off() {
    let dt = 0.005;
    let axis = TimeAxis::new(6.0, dt).unwrap();
    let m = desk_two_layer();
    let s = WaveSolver::new(&m, &SolverConfig::default(), axis).unwrap();
    let src = SourceSpec::new(10.0, 5.0, 4.0);
    let (_, field) = solve_forward(&s, 0, &src, &[], true).unwrap();
    let field = field.unwrap();
    assert_eq!(field.stride(), 1);
    let len = field.frame_len();
    let (mut a, mut b) = (vec![0.0; len], vec![0.0; len]);
    let off = ((src.peak_time() + 1.5 / src.f0) / dt).ceil() as usize;
    let mut energies = Vec::new();
    for n in off..axis.steps() {
        field.frame_at(n, &mut a);
        field.frame_at(n + 1, &mut b);
        energies.push(s.physical_energy(&a, &b));
    }
    let e0 = energies[0];
    let mut worst: f64 = 0.0;
    for (k, e) in energies.iter().enumerate() {
        let prior_min = energies[..=k].iter().cloned().fold(f64::INFINITY, f64::min);
        let allowed = 1e-3 * (1.0 + k as f64 / 1000.0);
        worst = worst.max((e - prior_min) / e0);
        assert!(e - prior_min <= allowed * e0 + 1e-12 * e0, "step {k}: growth {}", (e - prior_min) / e0);
    }
    println!("energy: start {e0:.3e}, end {:.3e}, worst growth {worst:.3e}", energies.last().unwrap());
}
