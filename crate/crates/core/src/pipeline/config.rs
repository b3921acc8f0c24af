//! Flat key-value run configuration.
//!
//! The file format is one `key = value` pair per line, `#` comments.
//! Unknown keys are errors, so typos fail fast.

use super::PipelineError;
use crate::attractor::AttractorConfig;
use crate::dso_vo::stereo::StereoConfig;
use crate::dso_vo::VoConfig;
use crate::geometry::CameraIntrinsics;
use std::collections::BTreeMap;
use std::f64::consts::TAU;

/// View-template matching parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalViewConfig {
    pub rows: usize,
    pub cols: usize,
    pub max_shift: u32,
    /// Mean-absolute-difference acceptance threshold.
    pub threshold: f64,
    /// Camera horizontal field of view, radians; converts column shifts to
    /// relative headings.
    pub horizontal_fov: f64,
}

impl Default for LocalViewConfig {
    fn default() -> Self {
        Self {
            rows: 16,
            cols: 48,
            max_shift: 6,
            threshold: 0.07,
            horizontal_fov: 1.047,
        }
    }
}

/// Experience-map optimization parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapConfig {
    pub robust_delta: f64,
    pub angle_scale: f64,
    pub optimize_iterations: usize,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            robust_delta: 1.0,
            angle_scale: 1.0,
            optimize_iterations: 100,
        }
    }
}

/// Full pipeline configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub intrinsics: CameraIntrinsics,
    pub attractor: AttractorConfig,
    /// Precision injected into the calibration cells on a template match.
    pub inject_weight: f64,
    pub local_view: LocalViewConfig,
    pub vo: VoConfig,
    pub map: MapConfig,
    /// Torus-phase distance that spawns a new experience, radians.
    pub experience_threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let intrinsics =
            CameraIntrinsics::new(280.0, 280.0, 159.5, 119.5, 0.25, 320, 240).unwrap();
        Self {
            intrinsics,
            attractor: AttractorConfig::default(),
            inject_weight: 2.0,
            local_view: LocalViewConfig::default(),
            vo: VoConfig::desk_default(intrinsics),
            map: MapConfig::default(),
            experience_threshold: 0.8,
        }
    }
}

/// Splits a flat key-value file into a map, rejecting malformed lines.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>, PipelineError> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(PipelineError::Config(format!(
                "line {}: expected 'key = value', got '{raw}'",
                lineno + 1
            )));
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() || value.is_empty() {
            return Err(PipelineError::Config(format!(
                "line {}: empty key or value in '{raw}'",
                lineno + 1
            )));
        }
        if out.insert(key.clone(), value).is_some() {
            return Err(PipelineError::Config(format!(
                "line {}: duplicate key '{key}'",
                lineno + 1
            )));
        }
    }
    Ok(out)
}

impl RunConfig {
    /// Parses a config file over the defaults. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let kv = parse_key_values(text)?;
        let mut cfg = RunConfig::default();

        let mut fx = cfg.intrinsics.fx;
        let mut fy = cfg.intrinsics.fy;
        let mut cx = cfg.intrinsics.cx;
        let mut cy = cfg.intrinsics.cy;
        let mut baseline = cfg.intrinsics.baseline;
        let mut width = cfg.intrinsics.width;
        let mut height = cfg.intrinsics.height;

        for (key, value) in &kv {
            let num = || -> Result<f64, PipelineError> {
                value.parse::<f64>().map_err(|_| {
                    PipelineError::Config(format!("key '{key}' has non-numeric value '{value}'"))
                })
            };
            match key.as_str() {
                "fx" => fx = num()?,
                "fy" => fy = num()?,
                "cx" => cx = num()?,
                "cy" => cy = num()?,
                "baseline" => baseline = num()?,
                "width" => width = num()? as usize,
                "height" => height = num()? as usize,
                "total_energy" => cfg.attractor.total_energy = num()?,
                "delta_inte" => cfg.attractor.delta_inte = num()?,
                "delta_cali" => cfg.attractor.delta_cali = num()?,
                "familiarity_threshold" => cfg.attractor.familiarity_threshold = num()?,
                "weight_floor" => cfg.attractor.weight_floor = num()?,
                "grid_gain" => cfg.attractor.grid_gain = num()?,
                "grid_period_m" => cfg.attractor.grid_gain = TAU / num()?,
                "inject_weight" => cfg.inject_weight = num()?,
                "descriptor_rows" => cfg.local_view.rows = num()? as usize,
                "descriptor_cols" => cfg.local_view.cols = num()? as usize,
                "max_shift" => cfg.local_view.max_shift = num()? as u32,
                "match_threshold" => cfg.local_view.threshold = num()?,
                "horizontal_fov" => cfg.local_view.horizontal_fov = num()?,
                "pyramid_levels" => cfg.vo.pyramid_levels = num()? as usize,
                "huber_gamma" => cfg.vo.huber_gamma = num()?,
                "gradient_c" => cfg.vo.gradient_c = num()?,
                "coupling_lambda" => cfg.vo.coupling_lambda = num()?,
                "max_keyframes" => cfg.vo.max_keyframes = num()? as usize,
                "g_const" => cfg.vo.g_const = num()?,
                "block_size" => cfg.vo.block_size = num()? as usize,
                "max_points" => cfg.vo.max_points_per_keyframe = num()? as usize,
                "flow_threshold" => cfg.vo.flow_threshold = num()?,
                "brightness_threshold" => cfg.vo.brightness_threshold = num()?,
                "stereo_search_range" => cfg.vo.stereo.search_range = num()? as usize,
                "stereo_max_cost" => cfg.vo.stereo.max_cost = num()?,
                "stereo_min_margin" => cfg.vo.stereo.min_margin = num()?,
                "track_iterations" => cfg.vo.max_track_iterations = num()? as usize,
                "joint_iterations" => cfg.vo.joint_iterations = num()? as usize,
                "refine_max_cost" => cfg.vo.refine_max_cost = num()?,
                "robust_delta" => cfg.map.robust_delta = num()?,
                "angle_scale" => cfg.map.angle_scale = num()?,
                "optimize_iterations" => cfg.map.optimize_iterations = num()? as usize,
                "experience_threshold" => cfg.experience_threshold = num()?,
                other => {
                    return Err(PipelineError::Config(format!("unknown config key '{other}'")))
                }
            }
        }

        cfg.intrinsics = CameraIntrinsics::new(fx, fy, cx, cy, baseline, width, height)
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.vo.intrinsics = cfg.intrinsics;
        // Keep stereo defaults unless overridden above.
        cfg.vo.stereo = StereoConfig {
            search_range: cfg.vo.stereo.search_range,
            max_cost: cfg.vo.stereo.max_cost,
            min_margin: cfg.vo.stereo.min_margin,
        };
        cfg.attractor
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        if cfg.experience_threshold <= 0.0 {
            return Err(PipelineError::Config(
                "experience_threshold must be positive".into(),
            ));
        }
        Ok(cfg)
    }

    /// Loads and parses a config file; an absent path yields the defaults.
    pub fn load(path: Option<&std::path::Path>) -> Result<Self, PipelineError> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    PipelineError::Config(format!("cannot read config {}: {e}", p.display()))
                })?;
                Self::parse(&text)
            }
            None => Ok(Self::default()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = RunConfig::default();
        assert!(cfg.attractor.validate().is_ok());
        assert!(cfg.experience_threshold > 0.0);
    }

    #[test]
    fn parses_overrides() {
        let cfg = RunConfig::parse(
            "fx = 100\nfy = 100\ncx = 50\ncy = 40\nwidth = 128\nheight = 96\n\
             grid_period_m = 20\nexperience_threshold = 0.5\n# comment\n",
        )
        .unwrap();
        assert_eq!(cfg.intrinsics.fx, 100.0);
        assert_eq!(cfg.intrinsics.width, 128);
        assert!((cfg.attractor.grid_gain - TAU / 20.0).abs() < 1e-12);
        assert_eq!(cfg.experience_threshold, 0.5);
        assert_eq!(cfg.vo.intrinsics.fx, 100.0);
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = RunConfig::parse("fx = 100\nnot_a_key = 3\n").unwrap_err();
        assert!(err.to_string().contains("not_a_key"));
    }

    #[test]
    fn malformed_line_is_an_error() {
        assert!(RunConfig::parse("fx 100\n").is_err());
        assert!(RunConfig::parse("fx =\n").is_err());
        assert!(RunConfig::parse("fx = 1\nfx = 2\n").is_err());
    }

    #[test]
    fn invalid_attractor_values_rejected() {
        assert!(RunConfig::parse("delta_inte = 1.5\n").is_err());
        assert!(RunConfig::parse("experience_threshold = 0\n").is_err());
    }
}
