//! Plain-text `key = value` experiment configuration.

use std::path::Path;

use rcm_vio::residuals::{KindStatistics, ResidualKind};
use rcm_vio::{OdometryConfig, OptimizerConfig, ResidualStatistics, VariantConfig};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}`: cannot parse `{value}`")]
    Value { key: String, value: String },
    #[error("override `{0}` is not of the form key=value")]
    Override(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Data(#[from] rcm_vio::io::DataError),
}

/// Everything a run depends on besides its input streams.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub variant: VariantConfig,
    pub odometry: OdometryConfig,
    pub optimizer: OptimizerConfig,
    /// IMU clock minus track clock, s.
    pub imu_offset: f64,
    /// Largest tolerated gap between track frames, s.
    pub max_track_gap: f64,
}

impl Default for Experiment {
    fn default() -> Self {
        Self {
            variant: VariantConfig::V3.with_optimization(true),
            odometry: OdometryConfig::default(),
            optimizer: OptimizerConfig::default(),
            imu_offset: 0.0,
            max_track_gap: 0.5,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::Value {
        key: key.into(),
        value: value.into(),
    })
}

fn stats_key(key: &str) -> Option<(ResidualKind, &str)> {
    let rest = key.strip_prefix("stats.")?;
    let (kind, field) = rest.split_once('.')?;
    Some((kind.parse().ok()?, field))
}

impl Experiment {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let o = &mut self.odometry;
        let p = &mut self.optimizer;
        match key {
            "variant" => {
                let opt = self.variant.use_optimization;
                self.variant = VariantConfig::from_name(value)
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?
                    .with_optimization(opt);
            }
            "optimize" => self.variant = self.variant.with_optimization(parse(key, value)?),
            "gamma" => p.weights.gamma = parse(key, value)?,
            "huber_delta" => p.weights.huber_delta = parse(key, value)?,
            "trigger" => p.trigger = parse(key, value)?,
            "window" => p.window = parse(key, value)?,
            "lm.initial_lambda" => p.lm.initial_lambda = parse(key, value)?,
            "lm.lambda_up" => p.lm.lambda_up = parse(key, value)?,
            "lm.lambda_down" => p.lm.lambda_down = parse(key, value)?,
            "lm.g_tol" => p.lm.g_tol = parse(key, value)?,
            "lm.f_tol" => p.lm.f_tol = parse(key, value)?,
            "lm.max_iterations" => p.lm.max_iterations = parse(key, value)?,
            "lm.max_lambda" => p.lm.max_lambda = parse(key, value)?,
            "ransac.threshold" => o.ransac.threshold = parse(key, value)?,
            "ransac.max_iterations" => o.ransac.max_iterations = parse(key, value)?,
            "ransac.confidence" => o.ransac.confidence = parse(key, value)?,
            "ransac.min_inlier_ratio" => o.ransac.min_inlier_ratio = parse(key, value)?,
            "n_min" => o.n_min = parse(key, value)?,
            "a_max" => o.a_max = parse(key, value)?,
            "theta_kf_deg" => o.theta_kf_deg = parse(key, value)?,
            "d_kf" => o.d_kf = parse(key, value)?,
            "theta_max_deg" => o.theta_max_deg = parse(key, value)?,
            "d_max" => o.d_max = parse(key, value)?,
            "epipolar_threshold" => o.epipolar_threshold = parse(key, value)?,
            "min_landmark_depth" => o.min_landmark_depth = parse(key, value)?,
            "max_landmark_depth" => o.max_landmark_depth = parse(key, value)?,
            "max_triangulation_error" => o.max_triangulation_error = parse(key, value)?,
            "pivot_min_keyframes" => o.pivot_min_keyframes = parse(key, value)?,
            "pivot_window" => o.pivot_window = parse(key, value)?,
            "pivot_max_condition" => o.pivot_max_condition = parse(key, value)?,
            "mag_reference_span" => o.mag_reference_span = parse(key, value)?,
            "seed" => o.seed = parse(key, value)?,
            "imu_offset" => self.imu_offset = parse(key, value)?,
            "max_track_gap" => self.max_track_gap = parse(key, value)?,
            _ => {
                let (kind, field) = stats_key(key).ok_or_else(|| ConfigError::UnknownKey(key.into()))?;
                let mut s = *p.weights.stats.get(kind);
                match field {
                    "mean" => s.mean = parse(key, value)?,
                    "variance" => s.variance = parse(key, value)?,
                    "count" => s.count = parse(key, value)?,
                    _ => return Err(ConfigError::UnknownKey(key.into())),
                }
                p.weights.stats.set(kind, s);
            }
        }
        Ok(())
    }

    pub fn set_stats(&mut self, stats: ResidualStatistics) {
        self.optimizer.weights.stats = stats;
    }

    /// All keys with their current values, in a stable order. Floats use the
    /// shortest representation that parses back to the same bits.
    pub fn entries(&self) -> Vec<(String, String)> {
        let o = &self.odometry;
        let p = &self.optimizer;
        let fixed: Vec<(&str, String)> = vec![
            ("variant", self.variant.name().unwrap_or("custom").to_string()),
            ("optimize", self.variant.use_optimization.to_string()),
            ("gamma", p.weights.gamma.to_string()),
            ("huber_delta", p.weights.huber_delta.to_string()),
            ("trigger", p.trigger.to_string()),
            ("window", p.window.to_string()),
            ("lm.initial_lambda", p.lm.initial_lambda.to_string()),
            ("lm.lambda_up", p.lm.lambda_up.to_string()),
            ("lm.lambda_down", p.lm.lambda_down.to_string()),
            ("lm.g_tol", p.lm.g_tol.to_string()),
            ("lm.f_tol", p.lm.f_tol.to_string()),
            ("lm.max_iterations", p.lm.max_iterations.to_string()),
            ("lm.max_lambda", p.lm.max_lambda.to_string()),
            ("ransac.threshold", o.ransac.threshold.to_string()),
            ("ransac.max_iterations", o.ransac.max_iterations.to_string()),
            ("ransac.confidence", o.ransac.confidence.to_string()),
            ("ransac.min_inlier_ratio", o.ransac.min_inlier_ratio.to_string()),
            ("n_min", o.n_min.to_string()),
            ("a_max", o.a_max.to_string()),
            ("theta_kf_deg", o.theta_kf_deg.to_string()),
            ("d_kf", o.d_kf.to_string()),
            ("theta_max_deg", o.theta_max_deg.to_string()),
            ("d_max", o.d_max.to_string()),
            ("epipolar_threshold", o.epipolar_threshold.to_string()),
            ("min_landmark_depth", o.min_landmark_depth.to_string()),
            ("max_landmark_depth", o.max_landmark_depth.to_string()),
            ("max_triangulation_error", o.max_triangulation_error.to_string()),
            ("pivot_min_keyframes", o.pivot_min_keyframes.to_string()),
            ("pivot_window", o.pivot_window.to_string()),
            ("pivot_max_condition", o.pivot_max_condition.to_string()),
            ("mag_reference_span", o.mag_reference_span.to_string()),
            ("seed", o.seed.to_string()),
            ("imu_offset", self.imu_offset.to_string()),
            ("max_track_gap", self.max_track_gap.to_string()),
        ];
        let mut owned: Vec<(String, String)> = fixed.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        for kind in ResidualKind::ALL {
            let KindStatistics { mean, variance, count } = *p.weights.stats.get(kind);
            let name = kind.name();
            owned.push((format!("stats.{name}.mean"), mean.to_string()));
            owned.push((format!("stats.{name}.variance"), variance.to_string()));
            owned.push((format!("stats.{name}.count"), count.to_string()));
        }
        owned
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.into(),
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        self.apply_text(&rcm_vio::io::read_text(path)?)
    }

    pub fn apply_override(&mut self, kv: &str) -> Result<(), ConfigError> {
        let (k, v) = kv.split_once('=').ok_or_else(|| ConfigError::Override(kv.into()))?;
        self.set(k.trim(), v.trim())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.variant.validate().map_err(|e| invalid(&e))?;
        self.odometry.validate().map_err(|e| invalid(&e))?;
        self.optimizer.validate().map_err(|e| invalid(&e))?;
        if !(self.max_track_gap > 0.0) {
            return Err(ConfigError::Invalid("max_track_gap must be positive".into()));
        }
        Ok(())
    }

    /// Config file text that restores this experiment exactly.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}
