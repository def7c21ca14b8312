//! Synthetic watch-time world.
//!
//! The world assigns every user and item a fixed latent vector and every
//! item a duration. A user's *expected* watch time for an item is a smooth,
//! monotone function of latent affinity:
//!
//! ```text
//! expected_watch(u, i) = duration_i * sigmoid(alpha * <z_u, z_i> + beta)
//! ```
//!
//! Session generation adds clamped Gaussian noise around that expectation,
//! so the expectation doubles as a noise-free oracle for evaluation: given
//! any recommendation we can ask the world how long the user would have
//! watched it on average.
//!
//! Ids are 1-based (`1..=n`); id 0 is reserved as the padding id everywhere
//! in this crate and never appears in generated events.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::checkpoint::{find_tensor, read_checkpoint, write_checkpoint};
use crate::numerics::matrix::Matrix;

/// World-generation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n_users: u32,
    pub n_items: u32,
    /// Width of the latent affinity space.
    pub latent_dim: usize,
    /// Master seed; every stream this world uses is derived from it.
    pub seed: u64,
    /// Slope of the affinity-to-watch-fraction squash.
    pub alpha: f64,
    /// Offset of the squash (0 centers the watch fraction at 1/2).
    pub beta: f64,
    /// Noise scale as a fraction of item duration.
    pub noise_sigma: f64,
    /// Item durations are log-uniform over this range, in seconds.
    pub duration_range: (f64, f64),
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_users: 100,
            n_items: 500,
            latent_dim: 16,
            seed: 0,
            alpha: 2.0,
            beta: 0.0,
            noise_sigma: 0.15,
            duration_range: (5.0, 300.0),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 || self.n_items == 0 || self.latent_dim == 0 {
            return Err(Error::Config(format!(
                "world needs users, items and a latent dim: {self:?}"
            )));
        }
        let (lo, hi) = self.duration_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::Config(format!(
                "duration range must satisfy 0 < lo <= hi, got ({lo}, {hi})"
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "noise sigma must be non-negative, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// Logging resolution of watch times, in ticks per second.
///
/// Sampled watch times are snapped down to this grid before they are
/// logged. Grid values are dyadic rationals, so every value up to ~16,000
/// seconds is exact in `f32`, and sums and differences of logged watch
/// times stay exact in `f64` — a cumulative watch-time-to-go sequence can
/// be telescoped back into its individual terms bit for bit.
pub const WATCH_TIME_TICKS_PER_SECOND: f64 = 1024.0;

/// Snap a non-negative duration down to the watch-time logging grid.
pub fn quantize_watch_time(seconds: f64) -> f64 {
    (seconds * WATCH_TIME_TICKS_PER_SECOND).floor() / WATCH_TIME_TICKS_PER_SECOND
}

/// One logged interaction: user watched item for `watch_time` seconds at
/// session step `step`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InteractionEvent {
    pub user_id: u32,
    pub item_id: u32,
    pub watch_time: f32,
    pub step: u32,
}

/// The frozen synthetic world.
#[derive(Debug, Clone)]
pub struct SimWorld {
    config: SimConfig,
    /// `n_users + 1` rows; row 0 is unused (ids are 1-based).
    user_latents: Matrix<f32>,
    /// `n_items + 1` rows; row 0 is unused.
    item_latents: Matrix<f32>,
    /// `n_items + 1` durations in seconds; index 0 unused.
    durations: Vec<f32>,
}

/// Session-generation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionConfig {
    /// Sessions generated per user.
    pub sessions_per_user: u32,
    /// Interactions per session.
    pub session_len: u32,
    /// Random candidates scored per step; one is chosen by softmax.
    pub candidates_per_step: usize,
    /// Softmax temperature over candidate affinities; higher is closer to
    /// uniform choice.
    pub sample_temperature: f64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            sessions_per_user: 1,
            session_len: 40,
            candidates_per_step: 20,
            sample_temperature: 1.0,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl SimWorld {
    /// Deterministically build a world from its config.
    pub fn generate(config: &SimConfig) -> Result<SimWorld> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let scale = 1.0 / (config.latent_dim as f64).sqrt();

        // Row 0 stays zero: ids are 1-based.
        let mut user_latents = Matrix::zeros(config.n_users as usize + 1, config.latent_dim);
        for r in 1..=config.n_users as usize {
            for c in 0..config.latent_dim {
                let z: f64 = StandardNormal.sample(&mut rng);
                user_latents.set(r, c, (z * scale) as f32);
            }
        }
        let mut item_latents = Matrix::zeros(config.n_items as usize + 1, config.latent_dim);
        for r in 1..=config.n_items as usize {
            for c in 0..config.latent_dim {
                let z: f64 = StandardNormal.sample(&mut rng);
                item_latents.set(r, c, (z * scale) as f32);
            }
        }

        // Log-uniform durations.
        let (lo, hi) = config.duration_range;
        let (ln_lo, ln_hi) = (lo.ln(), hi.ln());
        let mut durations = vec![0f32; config.n_items as usize + 1];
        for d in durations.iter_mut().skip(1) {
            let u: f64 = rng.random();
            *d = (ln_lo + u * (ln_hi - ln_lo)).exp() as f32;
        }

        Ok(SimWorld {
            config: config.clone(),
            user_latents,
            item_latents,
            durations,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn n_users(&self) -> u32 {
        self.config.n_users
    }

    pub fn n_items(&self) -> u32 {
        self.config.n_items
    }

    fn check_user(&self, user_id: u32) -> Result<()> {
        if user_id == 0 || user_id > self.config.n_users {
            return Err(Error::IdOutOfBounds {
                kind: "user".to_string(),
                id: user_id,
                max: self.config.n_users,
            });
        }
        Ok(())
    }

    fn check_item(&self, item_id: u32) -> Result<()> {
        if item_id == 0 || item_id > self.config.n_items {
            return Err(Error::IdOutOfBounds {
                kind: "item".to_string(),
                id: item_id,
                max: self.config.n_items,
            });
        }
        Ok(())
    }

    /// Item duration in seconds.
    pub fn duration(&self, item_id: u32) -> Result<f64> {
        self.check_item(item_id)?;
        Ok(self.durations[item_id as usize] as f64)
    }

    /// Latent affinity `<z_u, z_i>` (accumulated in f64).
    pub fn affinity(&self, user_id: u32, item_id: u32) -> Result<f64> {
        self.check_user(user_id)?;
        self.check_item(item_id)?;
        let u = self.user_latents.row(user_id as usize);
        let v = self.item_latents.row(item_id as usize);
        Ok(u.iter()
            .zip(v.iter())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum())
    }

    /// Latent similarity `<z_a, z_b>` between two items (accumulated in
    /// f64). Ground-truth probe for item-space analyses, e.g. checking how
    /// much of a user's direction a window of history items carries.
    pub fn item_affinity(&self, a: u32, b: u32) -> Result<f64> {
        self.check_item(a)?;
        self.check_item(b)?;
        let za = self.item_latents.row(a as usize);
        let zb = self.item_latents.row(b as usize);
        Ok(za.iter()
            .zip(zb.iter())
            .map(|(&x, &y)| x as f64 * y as f64)
            .sum())
    }

    /// Noise-free oracle: expected watch time in seconds.
    pub fn expected_watch_time(&self, user_id: u32, item_id: u32) -> Result<f64> {
        let affinity = self.affinity(user_id, item_id)?;
        let duration = self.duration(item_id)?;
        Ok(duration * sigmoid(self.config.alpha * affinity + self.config.beta))
    }

    /// Sample one noisy watch: `clamp(N(mu, sigma * duration), 0, duration)`
    /// around the oracle mean, snapped down to the logging grid (see
    /// [`WATCH_TIME_TICKS_PER_SECOND`]).
    pub fn sample_watch_time(
        &self,
        user_id: u32,
        item_id: u32,
        rng: &mut impl Rng,
    ) -> Result<f64> {
        let mu = self.expected_watch_time(user_id, item_id)?;
        let duration = self.duration(item_id)?;
        let sigma = self.config.noise_sigma * duration;
        let sample = if sigma > 0.0 {
            let normal = Normal::new(mu, sigma)
                .map_err(|e| Error::Config(format!("bad watch-noise distribution: {e}")))?;
            normal.sample(rng)
        } else {
            mu
        };
        Ok(quantize_watch_time(sample.clamp(0.0, duration)))
    }

    /// Generate interaction sessions for every user.
    ///
    /// Each user draws from an independent, seed-derived RNG stream, so the
    /// output is invariant to user iteration order. At every step the user
    /// sees `candidates_per_step` uniformly sampled items and picks one with
    /// probability softmax(affinity / temperature); the watch time is then a
    /// noisy draw around the oracle mean. Events are ordered by user, then
    /// by step.
    pub fn generate_sessions(&self, session_cfg: &SessionConfig) -> Result<Vec<InteractionEvent>> {
        if session_cfg.candidates_per_step == 0
            || session_cfg.session_len == 0
            || session_cfg.sessions_per_user == 0
        {
            return Err(Error::Config(format!(
                "session config must be positive: {session_cfg:?}"
            )));
        }
        if !(session_cfg.sample_temperature > 0.0 && session_cfg.sample_temperature.is_finite()) {
            return Err(Error::Config(format!(
                "sample temperature must be positive, got {}",
                session_cfg.sample_temperature
            )));
        }
        let mut events = Vec::with_capacity(
            self.config.n_users as usize
                * (session_cfg.sessions_per_user * session_cfg.session_len) as usize,
        );
        for user_id in 1..=self.config.n_users {
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5e55_10f5);
            rng.set_stream(user_id as u64);
            let mut step = 0u32;
            for _ in 0..session_cfg.sessions_per_user {
                for _ in 0..session_cfg.session_len {
                    let mut candidates = Vec::with_capacity(session_cfg.candidates_per_step);
                    for _ in 0..session_cfg.candidates_per_step {
                        candidates.push(rng.random_range(1..=self.config.n_items));
                    }
                    let item_id = self.pick_candidate(user_id, &candidates, session_cfg, &mut rng)?;
                    let watch = self.sample_watch_time(user_id, item_id, &mut rng)?;
                    events.push(InteractionEvent {
                        user_id,
                        item_id,
                        watch_time: watch as f32,
                        step,
                    });
                    step += 1;
                }
            }
        }
        Ok(events)
    }

    fn pick_candidate(
        &self,
        user_id: u32,
        candidates: &[u32],
        session_cfg: &SessionConfig,
        rng: &mut impl Rng,
    ) -> Result<u32> {
        // Softmax over affinity/temperature, max-shifted in f64.
        let mut scores = Vec::with_capacity(candidates.len());
        for &item in candidates {
            scores.push(self.affinity(user_id, item)? / session_cfg.sample_temperature);
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
        let mut pick: f64 = rng.random();
        for (i, &w) in weights.iter().enumerate() {
            pick -= w;
            if pick <= 0.0 {
                return Ok(candidates[i]);
            }
        }
        Ok(*candidates.last().expect("non-empty candidates"))
    }

    /// Persist to `<path>` (tensor data) plus `<path>.meta` (config text).
    pub fn save(&self, path: &Path) -> Result<()> {
        let durations = Matrix::from_vec(self.durations.len(), 1, self.durations.clone())?;
        write_checkpoint(
            path,
            &[
                ("world/user_latents", &self.user_latents),
                ("world/item_latents", &self.item_latents),
                ("world/durations", &durations),
            ],
        )?;
        let mut meta = String::new();
        let c = &self.config;
        let _ = writeln!(meta, "n_users={}", c.n_users);
        let _ = writeln!(meta, "n_items={}", c.n_items);
        let _ = writeln!(meta, "latent_dim={}", c.latent_dim);
        let _ = writeln!(meta, "seed={}", c.seed);
        let _ = writeln!(meta, "alpha={}", c.alpha);
        let _ = writeln!(meta, "beta={}", c.beta);
        let _ = writeln!(meta, "noise_sigma={}", c.noise_sigma);
        let _ = writeln!(meta, "duration_lo={}", c.duration_range.0);
        let _ = writeln!(meta, "duration_hi={}", c.duration_range.1);
        let meta_path = meta_path_for(path);
        std::fs::write(&meta_path, meta).map_err(|e| Error::io(meta_path, e))?;
        Ok(())
    }

    /// Load a world saved by [`SimWorld::save`].
    pub fn load(path: &Path) -> Result<SimWorld> {
        let meta_path = meta_path_for(path);
        let meta_text =
            std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let mut fields = std::collections::BTreeMap::new();
        for (i, line) in meta_text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(Error::Parse {
                line: i + 1,
                msg: format!("expected key=value in world meta, got '{line}'"),
            })?;
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |key: &str| -> Result<&String> {
            fields.get(key).ok_or_else(|| Error::Parse {
                line: 0,
                msg: format!("world meta missing '{key}'"),
            })
        };
        let parse_f64 = |key: &str| -> Result<f64> {
            get(key)?.parse::<f64>().map_err(|e| Error::Parse {
                line: 0,
                msg: format!("world meta '{key}': {e}"),
            })
        };
        let parse_u = |key: &str| -> Result<u64> {
            get(key)?.parse::<u64>().map_err(|e| Error::Parse {
                line: 0,
                msg: format!("world meta '{key}': {e}"),
            })
        };
        let config = SimConfig {
            n_users: parse_u("n_users")? as u32,
            n_items: parse_u("n_items")? as u32,
            latent_dim: parse_u("latent_dim")? as usize,
            seed: parse_u("seed")?,
            alpha: parse_f64("alpha")?,
            beta: parse_f64("beta")?,
            noise_sigma: parse_f64("noise_sigma")?,
            duration_range: (parse_f64("duration_lo")?, parse_f64("duration_hi")?),
        };
        config.validate()?;

        let tensors = read_checkpoint(path)?;
        let user_latents = find_tensor(&tensors, "world/user_latents", path)?.clone();
        let item_latents = find_tensor(&tensors, "world/item_latents", path)?.clone();
        let durations_m = find_tensor(&tensors, "world/durations", path)?;
        if user_latents.rows() != config.n_users as usize + 1
            || item_latents.rows() != config.n_items as usize + 1
            || durations_m.rows() != config.n_items as usize + 1
        {
            return Err(Error::CheckpointFormat {
                path: path.to_path_buf(),
                msg: "world tensors disagree with meta about user/item counts".to_string(),
            });
        }
        Ok(SimWorld {
            config,
            user_latents,
            item_latents,
            durations: durations_m.data().to_vec(),
        })
    }
}

fn meta_path_for(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".meta");
    std::path::PathBuf::from(os)
}
