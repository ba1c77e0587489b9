//! Synthetic training scenarios: initial states, reference bands and
//! disturbance trajectories, plus the line-oriented dataset file format.
//!
//! Dataset file:
//!
//! ```text
//! # ncgmm dataset
//! # split=train
//! # seed=0
//! # N=100
//! # scenarios=2000
//! # nx=1
//! # ny=1
//! # nd=1
//! id,k,g0,ymin,ymax,d
//! 0,0,13.52,15.1,17.1,0.0
//! ...
//! ```
//!
//! One row per (scenario, step). The initial state is repeated on every row
//! of its scenario. Multi-dimensional columns are suffixed `_0, _1, ...`.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{DatasetError, Error, Result};
use crate::io;

/// Generation parameters. Defaults follow the reference training setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub init_lo: f64,
    pub init_hi: f64,
    /// Range of the band lower bound.
    pub band_lo: f64,
    pub band_hi: f64,
    pub band_width: f64,
    pub rho: f64,
    pub sigma: f64,
    pub d_max: f64,
    pub d0: f64,
    pub p_meal: f64,
    pub n_train: usize,
    pub n_dev: usize,
    pub horizon: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            init_lo: 10.0,
            init_hi: 20.0,
            band_lo: 12.0,
            band_hi: 18.0,
            band_width: 2.0,
            rho: 0.9,
            sigma: 0.1,
            d_max: 1.0,
            d0: 0.0,
            p_meal: 0.5,
            n_train: 2000,
            n_dev: 200,
            horizon: 100,
        }
    }
}

impl ScenarioConfig {
    /// Checks ranges; errors name the offending key.
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::config(format!("scenarios.{key}"), msg));
        let finite = [
            ("init_lo", self.init_lo),
            ("init_hi", self.init_hi),
            ("band_lo", self.band_lo),
            ("band_hi", self.band_hi),
            ("band_width", self.band_width),
            ("rho", self.rho),
            ("sigma", self.sigma),
            ("d_max", self.d_max),
            ("d0", self.d0),
            ("p_meal", self.p_meal),
        ];
        if let Some((k, v)) = finite.iter().find(|(_, v)| !v.is_finite()) {
            return bad(k, format!("must be finite, got {v}"));
        }
        if self.init_lo >= self.init_hi {
            return bad("init_lo", format!("must be < init_hi ({} >= {})", self.init_lo, self.init_hi));
        }
        if self.band_lo > self.band_hi {
            return bad("band_lo", "must be <= band_hi".into());
        }
        if self.band_width <= 0.0 {
            return bad("band_width", format!("must be > 0, got {}", self.band_width));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return bad("rho", format!("must lie in [0, 1), got {}", self.rho));
        }
        if self.sigma < 0.0 {
            return bad("sigma", format!("must be >= 0, got {}", self.sigma));
        }
        if self.d_max <= 0.0 {
            return bad("d_max", format!("must be > 0, got {}", self.d_max));
        }
        if !(0.0..=1.0).contains(&self.p_meal) {
            return bad("p_meal", format!("must lie in [0, 1], got {}", self.p_meal));
        }
        if self.n_train == 0 {
            return bad("n_train", "must be >= 1".into());
        }
        if self.n_dev == 0 {
            return bad("n_dev", "must be >= 1".into());
        }
        if self.horizon == 0 {
            return bad("horizon", "must be >= 1".into());
        }
        Ok(())
    }
}

/// One closed-loop training problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub id: u64,
    pub g0: Vec<f64>,
    /// Per-step band lower bounds, each of length `ny`.
    pub y_min: Vec<Vec<f64>>,
    pub y_max: Vec<Vec<f64>>,
    /// Per-step disturbances, each of length `nd`.
    pub d: Vec<Vec<f64>>,
}

impl Scenario {
    pub fn horizon(&self) -> usize {
        self.d.len()
    }

    /// Tracking reference: the band midpoint.
    pub fn reference(&self, k: usize) -> Vec<f64> {
        self.y_min[k].iter().zip(&self.y_max[k]).map(|(lo, hi)| 0.5 * (lo + hi)).collect()
    }

    pub fn check(&self) -> Result<()> {
        let n = self.d.len();
        if self.y_min.len() != n || self.y_max.len() != n {
            return Err(Error::invalid(
                "scenario",
                format!("id {}: band length {}/{} vs disturbance length {n}", self.id, self.y_min.len(), self.y_max.len()),
            ));
        }
        for k in 0..n {
            if self.y_min[k].len() != self.y_max[k].len() {
                return Err(Error::invalid("scenario", format!("id {}: band width mismatch at step {k}", self.id)));
            }
            if self.y_min[k].iter().zip(&self.y_max[k]).any(|(lo, hi)| !(lo < hi)) {
                return Err(Error::invalid("scenario", format!("id {}: y_min >= y_max at step {k}", self.id)));
            }
        }
        let finite = self.g0.iter().chain(self.y_min.iter().flatten()).chain(self.y_max.iter().flatten()).chain(self.d.iter().flatten());
        if finite.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("scenario", format!("id {}: non-finite value", self.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "dev" => Some(Split::Dev),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub seed: u64,
    pub horizon: usize,
    pub nx: usize,
    pub ny: usize,
    pub nd: usize,
    pub scenarios: Vec<Scenario>,
}

/// Dimensions a generated scenario has to match.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nd: usize,
}

pub type ScenarioRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> ScenarioRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Each coordinate uniform on `[init_lo, init_hi]`.
pub fn sample_initial(rng: &mut impl Rng, cfg: &ScenarioConfig, nx: usize) -> Result<Vec<f64>> {
    if cfg.init_lo >= cfg.init_hi {
        return Err(Error::config("scenarios.init_lo", "must be < init_hi"));
    }
    Ok((0..nx).map(|_| rng.random_range(cfg.init_lo..=cfg.init_hi)).collect())
}

/// A band held constant over `n` steps: `y_min ~ U[band_lo, band_hi]`,
/// `y_max = y_min + band_width`, drawn independently per output.
pub fn sample_band(rng: &mut impl Rng, cfg: &ScenarioConfig, n: usize, ny: usize) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if n == 0 {
        return Err(Error::invalid("band horizon", "N must be >= 1"));
    }
    if !(cfg.band_width > 0.0) {
        return Err(Error::config("scenarios.band_width", format!("must be > 0, got {}", cfg.band_width)));
    }
    let lo: Vec<f64> = (0..ny).map(|_| rng.random_range(cfg.band_lo..=cfg.band_hi)).collect();
    let hi: Vec<f64> = lo.iter().map(|l| l + cfg.band_width).collect();
    Ok((vec![lo; n], vec![hi; n]))
}

/// Clipped AR(1) disturbance with an optional meal spike:
/// `d[k+1] = clamp(rho d[k] + sigma eta, 0, d_max)`, `eta ~ N(0, 1)`.
///
/// With probability `p_meal` a spike of size `U[d_max/2, d_max]` is added at
/// a uniformly chosen step, after which the AR recursion continues from the
/// raised level. `start` is the value at step 0 for every channel.
pub fn gen_disturbance(rng: &mut impl Rng, cfg: &ScenarioConfig, n: usize, start: &[f64]) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(Error::invalid("disturbance horizon", "N must be >= 1"));
    }
    if !(0.0..1.0).contains(&cfg.rho) {
        return Err(Error::config("scenarios.rho", format!("must lie in [0, 1), got {}", cfg.rho)));
    }
    if cfg.sigma < 0.0 {
        return Err(Error::config("scenarios.sigma", format!("must be >= 0, got {}", cfg.sigma)));
    }
    let nd = start.len();
    let meals: Vec<Option<(usize, f64)>> = (0..nd)
        .map(|_| {
            if rng.random_bool(cfg.p_meal) {
                let step = rng.random_range(0..n);
                let size = rng.random_range(0.5 * cfg.d_max..=cfg.d_max);
                Some((step, size))
            } else {
                None
            }
        })
        .collect();
    let clamp = |v: f64| v.clamp(0.0, cfg.d_max);
    let mut current: Vec<f64> = start.iter().map(|&v| clamp(v)).collect();
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        if k > 0 {
            for c in current.iter_mut() {
                let eta: f64 = rng.sample(StandardNormal);
                *c = clamp(cfg.rho * *c + cfg.sigma * eta);
            }
        }
        for (c, meal) in current.iter_mut().zip(&meals) {
            if let Some((step, size)) = meal {
                if *step == k {
                    *c = clamp(*c + size);
                }
            }
        }
        out.push(current.clone());
    }
    Ok(out)
}

fn generate_split(
    rng: &mut ScenarioRng,
    cfg: &ScenarioConfig,
    dims: Dims,
    count: usize,
    first_id: u64,
) -> Result<Vec<Scenario>> {
    let n = cfg.horizon;
    (0..count)
        .map(|i| {
            let g0 = sample_initial(rng, cfg, dims.nx)?;
            let (y_min, y_max) = sample_band(rng, cfg, n, dims.ny)?;
            let d = gen_disturbance(rng, cfg, n, &vec![cfg.d0; dims.nd])?;
            Ok(Scenario { id: first_id + i as u64, g0, y_min, y_max, d })
        })
        .collect()
}

/// Train and dev datasets, fully determined by `seed`. Train ids are
/// `0..n_train`, dev ids follow.
pub fn generate(cfg: &ScenarioConfig, dims: Dims, seed: u64) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let mut rng = rng_from_seed(seed);
    let train = generate_split(&mut rng, cfg, dims, cfg.n_train, 0)?;
    let dev = generate_split(&mut rng, cfg, dims, cfg.n_dev, cfg.n_train as u64)?;
    let wrap = |split, scenarios| Dataset {
        split,
        seed,
        horizon: cfg.horizon,
        nx: dims.nx,
        ny: dims.ny,
        nd: dims.nd,
        scenarios,
    };
    Ok((wrap(Split::Train, train), wrap(Split::Dev, dev)))
}

/// Index batches for one epoch: a seeded permutation cut into chunks of
/// `batch_size`; the final partial batch is kept.
pub fn batches(len: usize, batch_size: usize, shuffle_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size", "must be >= 1"));
    }
    if len == 0 {
        return Err(Error::invalid("dataset", "cannot batch an empty dataset"));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

fn column_names(prefix: &str, n: usize) -> Vec<String> {
    if n == 1 {
        vec![prefix.to_string()]
    } else {
        (0..n).map(|i| format!("{prefix}_{i}")).collect()
    }
}

fn header(nx: usize, ny: usize, nd: usize) -> String {
    let mut cols = vec!["id".to_string(), "k".to_string()];
    cols.extend(column_names("g0", nx));
    cols.extend(column_names("ymin", ny));
    cols.extend(column_names("ymax", ny));
    cols.extend(column_names("d", nd));
    cols.join(",")
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.scenarios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenarios.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("# ncgmm dataset\n");
        let _ = writeln!(s, "# split={}", self.split.as_str());
        let _ = writeln!(s, "# seed={}", self.seed);
        let _ = writeln!(s, "# N={}", self.horizon);
        let _ = writeln!(s, "# scenarios={}", self.scenarios.len());
        let _ = writeln!(s, "# nx={}", self.nx);
        let _ = writeln!(s, "# ny={}", self.ny);
        let _ = writeln!(s, "# nd={}", self.nd);
        s.push_str(&header(self.nx, self.ny, self.nd));
        s.push('\n');
        for sc in &self.scenarios {
            for k in 0..sc.horizon() {
                let _ = write!(s, "{},{}", sc.id, k);
                for v in sc.g0.iter().chain(&sc.y_min[k]).chain(&sc.y_max[k]).chain(&sc.d[k]) {
                    let _ = write!(s, ",{v:?}");
                }
                s.push('\n');
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, DatasetError> {
        let malformed = |line: usize, message: String| DatasetError::Malformed { line, message };
        let mut meta = std::collections::BTreeMap::new();
        let mut lines = text.lines().enumerate().peekable();
        while let Some((i, l)) = lines.peek().copied() {
            let Some(rest) = l.strip_prefix('#') else { break };
            if let Some((k, v)) = rest.trim().split_once('=') {
                meta.insert(k.trim().to_string(), (i + 1, v.trim().to_string()));
            }
            lines.next();
        }
        let get = |key: &str| -> Result<(usize, String), DatasetError> {
            meta.get(key).cloned().ok_or_else(|| malformed(0, format!("missing `# {key}=` preamble entry")))
        };
        let num = |key: &str| -> Result<usize, DatasetError> {
            let (line, v) = get(key)?;
            v.parse().map_err(|_| malformed(line, format!("{key} is not an integer: {v:?}")))
        };
        let (split_line, split_text) = get("split")?;
        let split = Split::parse(&split_text).ok_or_else(|| malformed(split_line, format!("unknown split {split_text:?}")))?;
        let (seed_line, seed_text) = get("seed")?;
        let seed = seed_text.parse().map_err(|_| malformed(seed_line, "seed is not an integer".into()))?;
        let horizon = num("N")?;
        let count = num("scenarios")?;
        let (nx, ny, nd) = (num("nx")?, num("ny")?, num("nd")?);

        let (hline, htext) = lines.next().ok_or_else(|| malformed(0, "missing header row".into()))?;
        let expected_header = header(nx, ny, nd);
        if htext.trim() != expected_header {
            return Err(malformed(hline + 1, format!("header {htext:?}, expected {expected_header:?}")));
        }
        let width = 2 + nx + 2 * ny + nd;

        let mut scenarios: Vec<Scenario> = Vec::with_capacity(count);
        for (i, l) in lines {
            let line = i + 1;
            if l.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = l.split(',').collect();
            if fields.len() != width {
                return Err(malformed(line, format!("expected {width} fields, found {}", fields.len())));
            }
            let id: u64 = fields[0].parse().map_err(|_| malformed(line, "bad id".into()))?;
            let k: usize = fields[1].parse().map_err(|_| malformed(line, "bad step index".into()))?;
            let vals = fields[2..]
                .iter()
                .map(|f| f.parse::<f64>().map_err(|_| malformed(line, format!("bad number {f:?}"))))
                .collect::<Result<Vec<f64>, _>>()?;
            let (g0, rest) = vals.split_at(nx);
            let (lo, rest) = rest.split_at(ny);
            let (hi, d) = rest.split_at(ny);
            let start_new = scenarios.last().is_none_or(|s| s.id != id);
            if start_new {
                if let Some(prev) = scenarios.last() {
                    if prev.horizon() != horizon {
                        return Err(DatasetError::HorizonMismatch { declared: horizon, id: prev.id, found: prev.horizon() });
                    }
                }
                if scenarios.iter().any(|s| s.id == id) {
                    return Err(malformed(line, format!("scenario id {id} appears in two blocks")));
                }
                scenarios.push(Scenario { id, g0: g0.to_vec(), y_min: vec![], y_max: vec![], d: vec![] });
            }
            let sc = scenarios.last_mut().expect("pushed above");
            if k != sc.horizon() {
                return Err(malformed(line, format!("step {k} out of order, expected {}", sc.horizon())));
            }
            if sc.g0 != g0 {
                return Err(malformed(line, format!("initial state changes inside scenario {id}")));
            }
            sc.y_min.push(lo.to_vec());
            sc.y_max.push(hi.to_vec());
            sc.d.push(d.to_vec());
        }
        if let Some(last) = scenarios.last() {
            if last.horizon() != horizon {
                return Err(DatasetError::HorizonMismatch { declared: horizon, id: last.id, found: last.horizon() });
            }
        }
        if scenarios.len() != count {
            return Err(malformed(0, format!("preamble declares {count} scenarios, found {}", scenarios.len())));
        }
        for s in &scenarios {
            s.check().map_err(|e| malformed(0, e.to_string()))?;
        }
        Ok(Self { split, seed, horizon, nx, ny, nd, scenarios })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = io::read(path)?;
        let text = String::from_utf8(bytes)
            .map_err(|_| DatasetError::Malformed { line: 0, message: "file is not UTF-8".into() })?;
        Ok(Self::from_text(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DIMS: Dims = Dims { nx: 1, ny: 1, nd: 1 };

    fn small_cfg() -> ScenarioConfig {
        ScenarioConfig { n_train: 20, n_dev: 4, horizon: 7, ..ScenarioConfig::default() }
    }

    #[test]
    fn initial_states_within_range_and_centered() {
        let cfg = ScenarioConfig::default();
        let mut rng = rng_from_seed(5);
        let draws: Vec<f64> = (0..10_000).map(|_| sample_initial(&mut rng, &cfg, 1).unwrap()[0]).collect();
        assert!(draws.iter().all(|v| (10.0..=20.0).contains(v)));
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((14.8..=15.2).contains(&mean), "mean {mean}");
        let mut again = rng_from_seed(5);
        assert_eq!(sample_initial(&mut again, &cfg, 1).unwrap()[0], draws[0]);
        let bad = ScenarioConfig { init_lo: 20.0, init_hi: 10.0, ..cfg };
        assert!(sample_initial(&mut rng, &bad, 1).is_err());
    }

    #[test]
    fn band_draws() {
        let cfg = ScenarioConfig::default();
        let mut rng = rng_from_seed(1);
        for _ in 0..1000 {
            let (lo, hi) = sample_band(&mut rng, &cfg, 5, 1).unwrap();
            assert!((12.0..=18.0).contains(&lo[0][0]));
            assert!(lo.iter().zip(&hi).all(|(l, h)| (h[0] - l[0] - 2.0).abs() < 1e-12 && l == &lo[0]));
        }
        let narrow = ScenarioConfig { band_width: 0.5, ..cfg.clone() };
        let (lo, hi) = sample_band(&mut rng, &narrow, 3, 1).unwrap();
        assert!(lo.iter().zip(&hi).all(|(l, h)| (h[0] - l[0] - 0.5).abs() < 1e-12));
        let a = sample_band(&mut rng_from_seed(9), &cfg, 4, 1).unwrap();
        let b = sample_band(&mut rng_from_seed(9), &cfg, 4, 1).unwrap();
        assert_eq!(a, b);
        let zero = ScenarioConfig { band_width: 0.0, ..cfg.clone() };
        assert!(sample_band(&mut rng, &zero, 3, 1).is_err());
        assert!(sample_band(&mut rng, &cfg, 0, 1).is_err());
    }

    #[test]
    fn degenerate_disturbance_is_zero() {
        let cfg = ScenarioConfig { sigma: 0.0, p_meal: 0.0, ..ScenarioConfig::default() };
        let d = gen_disturbance(&mut rng_from_seed(2), &cfg, 50, &[0.0]).unwrap();
        assert!(d.iter().all(|v| v[0] == 0.0));
    }

    #[test]
    fn disturbance_clamped_and_validated() {
        let cfg = ScenarioConfig { sigma: 0.5, p_meal: 1.0, ..ScenarioConfig::default() };
        let mut rng = rng_from_seed(3);
        for _ in 0..200 {
            let d = gen_disturbance(&mut rng, &cfg, 100, &[0.0]).unwrap();
            assert!(d.iter().all(|v| (0.0..=cfg.d_max).contains(&v[0])));
        }
        let bad_rho = ScenarioConfig { rho: 1.0, ..cfg.clone() };
        assert!(gen_disturbance(&mut rng, &bad_rho, 10, &[0.0]).is_err());
        let bad_sigma = ScenarioConfig { sigma: -0.1, ..cfg };
        assert!(gen_disturbance(&mut rng, &bad_sigma, 10, &[0.0]).is_err());
    }

    #[test]
    fn meal_spike_appears_when_certain() {
        let cfg = ScenarioConfig { sigma: 0.0, p_meal: 1.0, ..ScenarioConfig::default() };
        let d = gen_disturbance(&mut rng_from_seed(4), &cfg, 100, &[0.0]).unwrap();
        let peak = d.iter().map(|v| v[0]).fold(0.0, f64::max);
        assert!((0.5..=1.0).contains(&peak), "peak {peak}");
    }

    #[test]
    fn generate_counts_ids_and_determinism() {
        let cfg = small_cfg();
        let (train, dev) = generate(&cfg, DIMS, 42).unwrap();
        assert_eq!(train.len(), 20);
        assert_eq!(dev.len(), 4);
        assert!(train.scenarios.iter().all(|s| s.horizon() == 7));
        let train_ids: std::collections::HashSet<u64> = train.scenarios.iter().map(|s| s.id).collect();
        assert!(dev.scenarios.iter().all(|s| !train_ids.contains(&s.id)));
        let (train2, dev2) = generate(&cfg, DIMS, 42).unwrap();
        assert_eq!(train.to_text(), train2.to_text());
        assert_eq!(dev.to_text(), dev2.to_text());
        let bad = ScenarioConfig { n_train: 0, ..cfg };
        assert!(generate(&bad, DIMS, 1).is_err());
    }

    #[test]
    fn batches_partition_the_dataset() {
        let b = batches(2000, 64, 7).unwrap();
        assert_eq!(b.len(), 32);
        assert_eq!(b.iter().filter(|c| c.len() == 64).count(), 31);
        assert_eq!(b.last().unwrap().len(), 16);
        let mut all: Vec<usize> = b.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..2000).collect::<Vec<_>>());
        assert_eq!(b, batches(2000, 64, 7).unwrap());
        assert!(batches(0, 64, 7).is_err());
        assert!(batches(10, 0, 7).is_err());
    }

    #[test]
    fn dataset_text_round_trip() {
        let (train, _) = generate(&small_cfg(), DIMS, 3).unwrap();
        let back = Dataset::from_text(&train.to_text()).unwrap();
        assert_eq!(back, train);
        assert!(train.to_text().contains("\nid,k,g0,ymin,ymax,d\n"));
    }

    #[test]
    fn multi_dimensional_header() {
        assert_eq!(header(2, 1, 1), "id,k,g0_0,g0_1,ymin,ymax,d");
    }

    #[test]
    fn truncated_or_short_files_fail() {
        let (train, _) = generate(&small_cfg(), DIMS, 3).unwrap();
        let text = train.to_text();
        let cut = &text[..text.len() / 2];
        let cut = &cut[..cut.rfind('\n').unwrap() + 1];
        assert!(Dataset::from_text(cut).is_err());
        let half_line = &text[..text.len() - 5];
        assert!(Dataset::from_text(half_line).is_err());
    }

    #[test]
    fn declared_horizon_mismatch() {
        let cfg = ScenarioConfig { n_train: 1, horizon: 100, ..small_cfg() };
        let (train, _) = generate(&cfg, DIMS, 3).unwrap();
        let text = train.to_text();
        let mut lines: Vec<&str> = text.lines().collect();
        lines.pop();
        let text = lines.join("\n") + "\n";
        assert!(matches!(
            Dataset::from_text(&text),
            Err(DatasetError::HorizonMismatch { declared: 100, found: 99, .. })
        ));
    }
}
