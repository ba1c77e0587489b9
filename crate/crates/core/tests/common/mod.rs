//! Oracles shared by the closed-loop tests and the acceptance suite.
#![allow(dead_code)]

use ncgmm::autodiff::{finite_diff_grad, Tape};
use ncgmm::closedloop::{rollout, scenario_loss, LossWeights};
use ncgmm::linalg::Matrix;
use ncgmm::plant::LinearSsm;
use ncgmm::policy::{LinearPolicy, MlpPolicy, MlpShape, Policy};
use ncgmm::scenarios::Scenario;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_scenario(rng: &mut ChaCha8Rng, n: usize) -> Scenario {
    let lo = rng.random_range(12.0..18.0);
    Scenario {
        id: 0,
        g0: vec![rng.random_range(10.0..20.0)],
        y_min: vec![vec![lo]; n],
        y_max: vec![vec![lo + 2.0]; n],
        d: (0..n).map(|_| vec![rng.random_range(0.0..1.0)]).collect(),
    }
}

/// Distance of every abs/relu argument in the loss from its kink.
pub fn kink_margin(plant: &LinearSsm, policy: &MlpPolicy, s: &Scenario) -> f64 {
    let mut tape = Tape::new();
    let nodes = policy.register(&mut tape);
    let r = rollout(&mut tape, plant, policy, &nodes, s, s.horizon()).unwrap();
    let y: Vec<f64> = r.y.iter().map(|n| tape.value(*n)[0]).collect();
    let u: Vec<f64> = r.u.iter().map(|n| tape.value(*n)[0]).collect();
    let n = s.horizon();
    let mut m = f64::INFINITY;
    for k in 0..n {
        let (lo, hi) = (s.y_min[k][0], s.y_max[k][0]);
        m = m.min((y[k] - 0.5 * (lo + hi)).abs()).min((y[k] - lo).abs()).min((y[k] - hi).abs());
        if k > 0 {
            let du = (u[k] - u[k - 1]).abs();
            m = m.min(du).min((du - plant.du_max()).abs());
        }
    }
    m.min((y[n] - 0.5 * (s.y_min[n - 1][0] + s.y_max[n - 1][0])).abs())
}

/// Closed-form loss and gradient of a scalar plant under `u = w . [y, lo, hi, d] + beta`
/// over two steps, unrolled by hand.
pub fn hand_unrolled(
    (a, b, e, du_max): (f64, f64, f64, f64),
    wts: &LossWeights,
    theta: &[f64; 5],
    s: &Scenario,
) -> (f64, [f64; 5]) {
    let sgn = |x: f64| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 };
    let step = |x: f64| if x > 0.0 { 1.0 } else { 0.0 };
    let relu = |x: f64| x.max(0.0);
    let (lo0, hi0, d0) = (s.y_min[0][0], s.y_max[0][0], s.d[0][0]);
    let (lo1, hi1, d1) = (s.y_min[1][0], s.y_max[1][0], s.d[1][0]);
    let (r0, r1) = (0.5 * (lo0 + hi0), 0.5 * (lo1 + hi1));
    let w0 = theta[0];

    let y0 = s.g0[0];
    let phi0 = [y0, lo0, hi0, d0, 1.0];
    let u0: f64 = theta.iter().zip(&phi0).map(|(t, p)| t * p).sum();
    let y1 = a * y0 + b * u0 + e * d0;
    let phi1 = [y1, lo1, hi1, d1, 1.0];
    let u1: f64 = theta.iter().zip(&phi1).map(|(t, p)| t * p).sum();
    let y2 = a * y1 + b * u1 + e * d1;
    let du1 = u1 - u0;

    let track = 0.5 * ((y0 - r0).abs() + (y1 - r1).abs());
    let terminal = (y2 - r1).abs();
    let smooth = 0.5 * du1.abs();
    let con = 0.5
        * (relu(lo0 - y0) + relu(y0 - hi0) + relu(-du_max)
            + relu(lo1 - y1) + relu(y1 - hi1) + relu(du1.abs() - du_max));
    let value = wts.q_track * track + wts.q_terminal * terminal + wts.q_du * smooth + wts.q_con * con;

    let mut grad = [0.0; 5];
    for i in 0..5 {
        let du0 = phi0[i];
        let dy1 = b * du0;
        let du1_d = phi1[i] + w0 * dy1;
        let dy2 = a * dy1 + b * du1_d;
        let ddu1 = du1_d - du0;
        grad[i] = wts.q_track * 0.5 * sgn(y1 - r1) * dy1
            + wts.q_terminal * sgn(y2 - r1) * dy2
            + wts.q_du * 0.5 * sgn(du1) * ddu1
            + wts.q_con * 0.5 * ((-step(lo1 - y1) + step(y1 - hi1)) * dy1 + step(du1.abs() - du_max) * sgn(du1) * ddu1);
    }
    (value, grad)
}

const SHAPE: MlpShape = MlpShape { in_dim: 4, hidden: 32, depth: 2, nu: 1 };

/// Largest relative deviation between the taped gradient and central
/// differences (eps 1e-5) over `draws` random policy/scenario pairs with
/// horizon 5 on the default plant. Draws within 1e-3 of a kink are redrawn.
/// Components below 1e-3 of the largest gradient entry are compared against
/// that floor instead of their own magnitude.
pub fn bptt_vs_central_differences(draws: usize, seed: u64) -> f64 {
    let plant = LinearSsm::default_scalar();
    let w = LossWeights::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut done = 0;
    let mut worst: f64 = 0.0;
    while done < draws {
        let mut policy = MlpPolicy::init(rng.random(), SHAPE, vec![0.0], vec![5.0]).unwrap();
        let s = random_scenario(&mut rng, 5);
        if kink_margin(&plant, &policy, &s) < 1e-3 {
            continue;
        }
        let analytic = scenario_loss(&plant, &policy, &s, &w, true).unwrap().grad.unwrap();
        let theta = policy.params();
        let numeric = finite_diff_grad(
            |p| {
                policy.set_params(p)?;
                Ok(scenario_loss(&plant, &policy, &s, &w, false)?.loss)
            },
            &theta,
            1e-5,
        )
        .unwrap();
        let scale = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        for (a, f) in analytic.iter().zip(&numeric) {
            worst = worst.max((a - f).abs() / a.abs().max(f.abs()).max(1e-3 * scale));
        }
        done += 1;
    }
    worst
}

/// Largest absolute loss and gradient deviations between the tape and
/// [`hand_unrolled`] over three linear-policy cases on the scalar plant with
/// `B = -0.5`, horizon 2.
pub fn linear_policy_oracle_error() -> (f64, f64) {
    let (a, b, e, du_max) = (0.95, -0.5, 0.3, 1.0);
    let plant = LinearSsm::scalar(a, b, 1.0, e, 0.0, 5.0, du_max);
    let w = LossWeights { q_track: 0.01, q_du: 0.1, q_con: 0.02, q_terminal: 0.03 };
    let band = |lo: f64| (vec![vec![lo]; 2], vec![vec![lo + 2.0]; 2]);
    let case = |id: u64, g0: f64, lo: f64, d: [f64; 2]| {
        let (y_min, y_max) = band(lo);
        Scenario { id, g0: vec![g0], y_min, y_max, d: vec![vec![d[0]], vec![d[1]]] }
    };
    let cases = [
        ([0.1, -0.05, 0.02, 0.4, 0.3], case(0, 15.0, 12.0, [0.2, 0.7])),
        // y1 ends above the band.
        ([-0.8, 0.3, 0.1, 1.0, 2.0], case(1, 16.5, 15.0, [0.0, 0.9])),
        // y1 ends below the band and |du1| exceeds du_max.
        ([0.5, 0.2, -0.3, -1.0, -4.0], case(2, 11.0, 12.5, [1.0, 0.1])),
    ];
    let (mut loss_err, mut grad_err) = (0.0f64, 0.0f64);
    for (theta, s) in &cases {
        let policy = LinearPolicy::new(Matrix::from_row_major(1, 4, theta[..4].to_vec()).unwrap(), vec![theta[4]]).unwrap();
        let got = scenario_loss(&plant, &policy, s, &w, true).unwrap();
        let (value, grad) = hand_unrolled((a, b, e, du_max), &w, theta, s);
        loss_err = loss_err.max((got.loss - value).abs());
        for (g, h) in got.grad.unwrap().iter().zip(&grad) {
            grad_err = grad_err.max((g - h).abs());
        }
    }
    (loss_err, grad_err)
}
