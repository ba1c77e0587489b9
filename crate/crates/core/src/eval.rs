//! Long closed-loop evaluation runs, summary metrics and trajectory export.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ShapeError};
use crate::io;
use crate::plant::LinearSsm;
use crate::policy::{build_features, feature_dim, Policy};
use crate::scenarios::{gen_disturbance, rng_from_seed, sample_band, sample_initial, ScenarioConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub steps: usize,
    /// Steps between band changes.
    pub band_dwell: usize,
    /// Leading steps excluded from band scoring.
    pub transient: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { steps: 3000, band_dwell: 500, transient: 200 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("eval.steps", "must be >= 1"));
        }
        if self.band_dwell == 0 {
            return Err(Error::config("eval.band_dwell", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub k: usize,
    pub g: Vec<f64>,
    pub y: Vec<f64>,
    pub u: Vec<f64>,
    pub d: Vec<f64>,
    pub y_min: Vec<f64>,
    pub y_max: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub records: Vec<Record>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Largest deviation between recorded states and the plant re-stepped
    /// from each recorded `(g, u, d)`.
    pub fn replay_error(&self, model: &LinearSsm) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for pair in self.records.windows(2) {
            let next = model.step(&pair[0].g, &pair[0].u, &pair[0].d)?;
            for (a, b) in next.iter().zip(&pair[1].g) {
                worst = worst.max((a - b).abs());
            }
        }
        Ok(worst)
    }
}

/// Closed-loop run of `policy` on `model` for `cfg.steps` steps. The band is
/// redrawn every `band_dwell` steps and the disturbance is generated in
/// chunks of the training horizon, continuing the AR state across chunks.
pub fn simulate<P: Policy + ?Sized>(
    model: &LinearSsm,
    policy: &P,
    scenario_cfg: &ScenarioConfig,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<Trajectory> {
    cfg.validate()?;
    if policy.in_dim() != feature_dim(model.ny(), model.nd()) || policy.out_dim() != model.nu() {
        return Err(ShapeError::new(
            "simulate",
            format!(
                "policy maps {} -> {} but the plant needs {} -> {}",
                policy.in_dim(),
                policy.out_dim(),
                feature_dim(model.ny(), model.nd()),
                model.nu()
            ),
        )
        .into());
    }
    let steps = cfg.steps;
    let mut rng = rng_from_seed(seed);
    let mut g = sample_initial(&mut rng, scenario_cfg, model.nx())?;

    let mut y_min = Vec::with_capacity(steps);
    let mut y_max = Vec::with_capacity(steps);
    while y_min.len() < steps {
        let len = cfg.band_dwell.min(steps - y_min.len());
        let (lo, hi) = sample_band(&mut rng, scenario_cfg, len, model.ny())?;
        y_min.extend(lo);
        y_max.extend(hi);
    }

    let chunk = scenario_cfg.horizon.max(1);
    let mut d = gen_disturbance(&mut rng, scenario_cfg, chunk.min(steps), &vec![scenario_cfg.d0; model.nd()])?;
    while d.len() < steps {
        let last = d.last().expect("non-empty").clone();
        let len = chunk.min(steps - d.len());
        let more = gen_disturbance(&mut rng, scenario_cfg, len + 1, &last)?;
        d.extend(more.into_iter().skip(1));
    }

    let mut records = Vec::with_capacity(steps);
    for k in 0..steps {
        let y = model.observe(&g)?;
        let features = build_features(&y, &y_min[k], &y_max[k], &d[k])?;
        let u = policy.forward_values(&features)?;
        let next = model.step(&g, &u, &d[k])?;
        records.push(Record {
            k,
            g: std::mem::replace(&mut g, next),
            y,
            u,
            d: d[k].clone(),
            y_min: y_min[k].clone(),
            y_max: y_max[k].clone(),
        });
    }
    Ok(Trajectory { records })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub steps: usize,
    pub transient: usize,
    /// Fraction of scored steps (`k >= transient`) with every output inside its band.
    pub time_in_band_fraction: f64,
    /// Scored steps with any output outside its band.
    pub band_violation_count: usize,
    /// Largest distance outside the band over scored steps.
    pub max_band_excursion: f64,
    /// Mean over consecutive steps of the summed absolute control change.
    pub mean_abs_du: f64,
    pub mean_u: f64,
    /// Steps with every control inside `[u_min, u_max]`, as a fraction of all steps.
    pub control_bound_fraction: f64,
}

impl Metrics {
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "steps={}", self.steps);
        let _ = writeln!(s, "transient={}", self.transient);
        let _ = writeln!(s, "time_in_band_fraction={:?}", self.time_in_band_fraction);
        let _ = writeln!(s, "band_violation_count={}", self.band_violation_count);
        let _ = writeln!(s, "max_band_excursion={:?}", self.max_band_excursion);
        let _ = writeln!(s, "mean_abs_du={:?}", self.mean_abs_du);
        let _ = writeln!(s, "mean_u={:?}", self.mean_u);
        let _ = writeln!(s, "control_bound_fraction={:?}", self.control_bound_fraction);
        s
    }
}

impl Metrics {
    /// Pools metrics of independent runs as if their scored steps were one run.
    pub fn pooled(runs: &[Metrics]) -> Result<Metrics> {
        let first = runs.first().ok_or_else(|| Error::invalid("metrics", "nothing to pool"))?;
        let steps: usize = runs.iter().map(|m| m.steps).sum();
        let scored: usize = runs.iter().map(|m| m.steps - m.transient).sum();
        let pairs: usize = runs.iter().map(|m| m.steps - 1).sum();
        let violations: usize = runs.iter().map(|m| m.band_violation_count).sum();
        let weighted = |f: fn(&Metrics) -> f64, w: fn(&Metrics) -> usize| runs.iter().map(|m| f(m) * w(m) as f64).sum::<f64>();
        Ok(Metrics {
            steps,
            transient: first.transient,
            time_in_band_fraction: (scored - violations) as f64 / scored as f64,
            band_violation_count: violations,
            max_band_excursion: runs.iter().map(|m| m.max_band_excursion).fold(0.0, f64::max),
            mean_abs_du: if pairs > 0 { weighted(|m| m.mean_abs_du, |m| m.steps - 1) / pairs as f64 } else { 0.0 },
            mean_u: weighted(|m| m.mean_u, |m| m.steps) / steps as f64,
            control_bound_fraction: weighted(|m| m.control_bound_fraction, |m| m.steps) / steps as f64,
        })
    }
}

fn excursion(r: &Record) -> f64 {
    r.y.iter()
        .zip(r.y_min.iter().zip(&r.y_max))
        .map(|(y, (lo, hi))| (lo - y).max(y - hi).max(0.0))
        .fold(0.0, f64::max)
}

/// Summary statistics; band metrics only count steps `k >= transient`.
/// `u_bounds` is used for the control-bound fraction when given.
pub fn metrics(traj: &Trajectory, transient: usize, u_bounds: Option<(&[f64], &[f64])>) -> Result<Metrics> {
    let n = traj.len();
    if n <= transient {
        return Err(Error::invalid("trajectory", format!("length {n} must exceed the transient {transient}")));
    }
    let scored = &traj.records[transient..];
    let violations = scored.iter().filter(|r| excursion(r) > 0.0).count();
    let max_exc = scored.iter().map(excursion).fold(0.0, f64::max);
    let du_sum: f64 = traj
        .records
        .windows(2)
        .map(|w| w[1].u.iter().zip(&w[0].u).map(|(a, b)| (a - b).abs()).sum::<f64>())
        .sum();
    let mean_abs_du = if n > 1 { du_sum / (n - 1) as f64 } else { 0.0 };
    let mean_u = traj.records.iter().map(|r| r.u.iter().sum::<f64>() / r.u.len().max(1) as f64).sum::<f64>() / n as f64;
    let inside = match u_bounds {
        Some((lo, hi)) => traj
            .records
            .iter()
            .filter(|r| r.u.iter().zip(lo.iter().zip(hi)).all(|(u, (l, h))| l <= u && u <= h))
            .count(),
        None => n,
    };
    Ok(Metrics {
        steps: n,
        transient,
        time_in_band_fraction: (scored.len() - violations) as f64 / scored.len() as f64,
        band_violation_count: violations,
        max_band_excursion: max_exc,
        mean_abs_du,
        mean_u,
        control_bound_fraction: inside as f64 / n as f64,
    })
}

fn names(prefix: &str, n: usize) -> Vec<String> {
    if n == 1 {
        vec![prefix.to_string()]
    } else {
        (0..n).map(|i| format!("{prefix}_{i}")).collect()
    }
}

/// CSV with columns `k,y,u,d,ymin,ymax`; floats carry 17 significant digits.
pub fn to_csv(traj: &Trajectory) -> Result<String> {
    let first = traj.records.first().ok_or_else(|| Error::invalid("trajectory", "is empty"))?;
    let mut cols = vec!["k".to_string()];
    cols.extend(names("y", first.y.len()));
    cols.extend(names("u", first.u.len()));
    cols.extend(names("d", first.d.len()));
    cols.extend(names("ymin", first.y_min.len()));
    cols.extend(names("ymax", first.y_max.len()));
    let mut s = cols.join(",");
    s.push('\n');
    for r in &traj.records {
        let _ = write!(s, "{}", r.k);
        for v in r.y.iter().chain(&r.u).chain(&r.d).chain(&r.y_min).chain(&r.y_max) {
            let _ = write!(s, ",{v:.16e}");
        }
        s.push('\n');
    }
    Ok(s)
}

/// Row of a trajectory CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub k: usize,
    pub y: Vec<f64>,
    pub u: Vec<f64>,
    pub d: Vec<f64>,
    pub y_min: Vec<f64>,
    pub y_max: Vec<f64>,
}

/// Parses [`to_csv`] output given the output, control and disturbance widths.
pub fn parse_csv(text: &str, ny: usize, nu: usize, nd: usize) -> Result<Vec<CsvRow>> {
    let mut lines = text.lines();
    lines.next().ok_or_else(|| Error::invalid("trajectory csv", "missing header"))?;
    lines
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 1 + 3 * ny + nu + nd {
                return Err(Error::invalid("trajectory csv", format!("row {} has {} fields", i + 1, f.len())));
            }
            let k = f[0].parse().map_err(|_| Error::invalid("trajectory csv", format!("bad k in row {}", i + 1)))?;
            let v = f[1..]
                .iter()
                .map(|x| x.parse::<f64>().map_err(|_| Error::invalid("trajectory csv", format!("bad number {x:?}"))))
                .collect::<Result<Vec<f64>>>()?;
            let (y, rest) = v.split_at(ny);
            let (u, rest) = rest.split_at(nu);
            let (d, rest) = rest.split_at(nd);
            let (lo, hi) = rest.split_at(ny);
            Ok(CsvRow { k, y: y.to_vec(), u: u.to_vec(), d: d.to_vec(), y_min: lo.to_vec(), y_max: hi.to_vec() })
        })
        .collect()
}

pub fn export_csv(traj: &Trajectory, path: &Path) -> Result<()> {
    let text = to_csv(traj)?;
    io::write_atomic(path, text.as_bytes())
}

const SVG_W: f64 = 960.0;
const PANEL_H: f64 = 260.0;
const MARGIN: f64 = 50.0;

struct Panel {
    top: f64,
    lo: f64,
    hi: f64,
    steps: usize,
}

impl Panel {
    fn new(top: f64, lo: f64, hi: f64, steps: usize) -> Self {
        let pad = ((hi - lo) * 0.05).max(1e-6);
        Self { top, lo: lo - pad, hi: hi + pad, steps }
    }

    fn x(&self, k: usize) -> f64 {
        MARGIN + (SVG_W - 2.0 * MARGIN) * k as f64 / (self.steps.max(2) - 1) as f64
    }

    fn y(&self, v: f64) -> f64 {
        self.top + PANEL_H * (1.0 - (v - self.lo) / (self.hi - self.lo))
    }

    fn polyline(&self, values: impl Iterator<Item = f64>, style: &str) -> String {
        let mut pts = String::new();
        for (k, v) in values.enumerate() {
            if k > 0 {
                pts.push(' ');
            }
            let _ = write!(pts, "{:.2},{:.2}", self.x(k), self.y(v));
        }
        format!("<polyline fill=\"none\" {style} points=\"{pts}\"/>\n")
    }

    fn frame(&self, title: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "<rect x=\"{MARGIN}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{PANEL_H}\" fill=\"none\" stroke=\"#888\"/>",
            self.top,
            SVG_W - 2.0 * MARGIN
        );
        let _ = writeln!(s, "<text x=\"{MARGIN}\" y=\"{:.2}\" font-size=\"14\">{title}</text>", self.top - 8.0);
        for v in [self.lo, 0.5 * (self.lo + self.hi), self.hi] {
            let _ = writeln!(
                s,
                "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"10\" text-anchor=\"end\">{v:.2}</text>",
                MARGIN - 4.0,
                self.y(v) + 3.0
            );
        }
        s
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// Two-panel SVG: first output with its band envelope on top, first control
/// and first disturbance below.
pub fn to_svg(traj: &Trajectory) -> Result<String> {
    if traj.is_empty() {
        return Err(Error::invalid("trajectory", "is empty"));
    }
    let n = traj.len();
    let recs = &traj.records;
    let (ylo, yhi) = range(recs.iter().flat_map(|r| [r.y[0], r.y_min[0], r.y_max[0]]));
    let (ulo, uhi) = range(recs.iter().flat_map(|r| [r.u[0], r.d.first().copied().unwrap_or(r.u[0])]));
    let top = Panel::new(40.0, ylo, yhi, n);
    let bottom = Panel::new(40.0 + PANEL_H + 60.0, ulo, uhi, n);
    let height = bottom.top + PANEL_H + 40.0;

    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{height:.0}\" viewBox=\"0 0 {SVG_W} {height:.0}\">"
    );
    s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    s.push_str(&top.frame("glucose output y with reference band"));
    let mut band = String::new();
    for (k, r) in recs.iter().enumerate() {
        let _ = write!(band, "{:.2},{:.2} ", top.x(k), top.y(r.y_max[0]));
    }
    for (k, r) in recs.iter().enumerate().rev() {
        let _ = write!(band, "{:.2},{:.2} ", top.x(k), top.y(r.y_min[0]));
    }
    let _ = writeln!(s, "<polygon fill=\"#cfe8cf\" stroke=\"none\" points=\"{}\"/>", band.trim_end());
    s.push_str(&top.polyline(recs.iter().map(|r| r.y[0]), "stroke=\"#1f4e9c\" stroke-width=\"1.2\""));
    s.push_str(&bottom.frame("control u (solid) and disturbance d (dashed)"));
    s.push_str(&bottom.polyline(recs.iter().map(|r| r.u[0]), "stroke=\"#b03a2e\" stroke-width=\"1.2\""));
    if !recs[0].d.is_empty() {
        s.push_str(&bottom.polyline(recs.iter().map(|r| r.d[0]), "stroke=\"#555\" stroke-dasharray=\"4 3\""));
    }
    let _ = writeln!(
        s,
        "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\" text-anchor=\"middle\">step k</text>",
        SVG_W / 2.0,
        height - 10.0
    );
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn render_svg(traj: &Trajectory, path: &Path) -> Result<()> {
    let text = to_svg(traj)?;
    io::write_atomic(path, text.as_bytes())
}
