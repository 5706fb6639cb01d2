//! Flat `key = value` run configuration covering every module setting.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::descriptor::VladFit;
use crate::error::{Error, Result};
use crate::pipeline::{FrontEnd, LcdConfig, LossConfig, PoseMethod};
use crate::registration::IcpVariant;

/// Documentation of one configuration key.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KeyDoc {
    pub key: &'static str,
    pub default: &'static str,
    pub unit: &'static str,
    pub help: &'static str,
}

pub const KEYS: &[KeyDoc] = &[
    KeyDoc {
        key: "seed",
        default: "0",
        unit: "-",
        help: "root seed of every random stream",
    },
    KeyDoc {
        key: "voxel.size",
        default: "0.1",
        unit: "m",
        help: "voxel edge for downsampling",
    },
    KeyDoc {
        key: "keypoints",
        default: "1024",
        unit: "count",
        help: "keypoints N per scan",
    },
    KeyDoc {
        key: "features.radii",
        default: "2,4,8",
        unit: "m",
        help: "neighborhood radii",
    },
    KeyDoc {
        key: "features.bins",
        default: "8",
        unit: "count",
        help: "histogram bins",
    },
    KeyDoc {
        key: "features.normal_k",
        default: "10",
        unit: "count",
        help: "neighbors per normal",
    },
    KeyDoc {
        key: "vlad.clusters",
        default: "64",
        unit: "count",
        help: "VLAD clusters K",
    },
    KeyDoc {
        key: "vlad.output_dim",
        default: "33",
        unit: "count",
        help: "descriptor dimension G",
    },
    KeyDoc {
        key: "vlad.pca_dim",
        default: "200",
        unit: "count",
        help: "principal subspace for fitting",
    },
    KeyDoc {
        key: "vlad.within_regularization",
        default: "0.1",
        unit: "ratio",
        help: "ridge on same-place scatter",
    },
    KeyDoc {
        key: "vlad.intra_normalization",
        default: "false",
        unit: "bool",
        help: "normalize each cluster block",
    },
    KeyDoc {
        key: "vlad.pair_radius",
        default: "4",
        unit: "m",
        help: "same-place radius for fitting pairs",
    },
    KeyDoc {
        key: "uot.lambda",
        default: "0.0005",
        unit: "-",
        help: "entropic regularization",
    },
    KeyDoc {
        key: "uot.rho",
        default: "0.00003",
        unit: "-",
        help: "marginal relaxation",
    },
    KeyDoc {
        key: "uot.iterations",
        default: "5",
        unit: "count",
        help: "Sinkhorn iterations L",
    },
    KeyDoc {
        key: "ransac.iterations",
        default: "5000",
        unit: "count",
        help: "hypotheses drawn",
    },
    KeyDoc {
        key: "ransac.threshold",
        default: "0.6",
        unit: "m",
        help: "inlier distance",
    },
    KeyDoc {
        key: "ransac.sample_size",
        default: "3",
        unit: "count",
        help: "matches per hypothesis",
    },
    KeyDoc {
        key: "ransac.min_inlier_fraction",
        default: "0.05",
        unit: "ratio",
        help: "fitness needed to converge",
    },
    KeyDoc {
        key: "ransac.mutual",
        default: "true",
        unit: "bool",
        help: "keep mutual nearest matches only",
    },
    KeyDoc {
        key: "icp.variant",
        default: "point_to_point",
        unit: "-",
        help: "point_to_point or point_to_plane",
    },
    KeyDoc {
        key: "icp.max_iterations",
        default: "50",
        unit: "count",
        help: "iteration cap",
    },
    KeyDoc {
        key: "icp.max_distance",
        default: "1",
        unit: "m",
        help: "correspondence distance",
    },
    KeyDoc {
        key: "icp.epsilon",
        default: "1e-6",
        unit: "m+rad",
        help: "update size that stops ICP",
    },
    KeyDoc {
        key: "lcd.threshold",
        default: "0.5",
        unit: "-",
        help: "descriptor distance threshold th",
    },
    KeyDoc {
        key: "lcd.icp_fitness",
        default: "0.6",
        unit: "ratio",
        help: "ICP fitness threshold th_icp",
    },
    KeyDoc {
        key: "lcd.exclusion",
        default: "50",
        unit: "scans",
        help: "recent scans never matched M",
    },
    KeyDoc {
        key: "lcd.keyframe_stride",
        default: "1",
        unit: "scans",
        help: "process every n-th scan",
    },
    KeyDoc {
        key: "lcd.method",
        default: "ransac",
        unit: "-",
        help: "loop registration: ransac or fast",
    },
    KeyDoc {
        key: "eval.loop_radius",
        default: "4",
        unit: "m",
        help: "groundtruth loop radius",
    },
    KeyDoc {
        key: "eval.exclusion",
        default: "50",
        unit: "scans",
        help: "groundtruth exclusion window",
    },
    KeyDoc {
        key: "loss.margin",
        default: "0.5",
        unit: "-",
        help: "triplet margin m",
    },
    KeyDoc {
        key: "loss.beta",
        default: "0.05",
        unit: "-",
        help: "weight of the transport loss",
    },
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub front_end: FrontEnd,
    pub vlad: VladFit,
    pub pair_radius: f64,
    pub lcd: LcdConfig,
    pub eval_loop_radius: f64,
    pub eval_exclusion: usize,
    pub loss: LossConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            front_end: FrontEnd::default(),
            vlad: VladFit::default(),
            pair_radius: 4.0,
            lcd: LcdConfig::default(),
            eval_loop_radius: 4.0,
            eval_exclusion: 50,
            loss: LossConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::InvalidValue {
        key: key.to_string(),
        message: format!("cannot parse `{value}`"),
    })
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn variant_name(v: IcpVariant) -> &'static str {
    match v {
        IcpVariant::PointToPoint => "point_to_point",
        IcpVariant::PointToPlane => "point_to_plane",
    }
}

impl RunConfig {
    /// Sets one key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "voxel.size" => self.front_end.voxel.voxel_size = parse(key, v)?,
            "keypoints" => self.front_end.keypoints = parse(key, v)?,
            "features.radii" => self.front_end.features.radii = parse_list(key, v)?,
            "features.bins" => self.front_end.features.bins = parse(key, v)?,
            "features.normal_k" => self.front_end.features.normal_k = parse(key, v)?,
            "vlad.clusters" => self.vlad.clusters = parse(key, v)?,
            "vlad.output_dim" => self.vlad.output_dim = parse(key, v)?,
            "vlad.pca_dim" => self.vlad.pca_dim = parse(key, v)?,
            "vlad.within_regularization" => self.vlad.within_regularization = parse(key, v)?,
            "vlad.intra_normalization" => self.vlad.intra_normalization = parse(key, v)?,
            "vlad.pair_radius" => self.pair_radius = parse(key, v)?,
            "uot.lambda" => self.lcd.uot.lambda = parse(key, v)?,
            "uot.rho" => self.lcd.uot.rho = parse(key, v)?,
            "uot.iterations" => self.lcd.uot.iterations = parse(key, v)?,
            "ransac.iterations" => self.lcd.ransac.max_iterations = parse(key, v)?,
            "ransac.threshold" => self.lcd.ransac.inlier_threshold = parse(key, v)?,
            "ransac.sample_size" => self.lcd.ransac.sample_size = parse(key, v)?,
            "ransac.min_inlier_fraction" => self.lcd.ransac.min_inlier_fraction = parse(key, v)?,
            "ransac.mutual" => self.lcd.ransac.mutual_check = parse(key, v)?,
            "icp.variant" => {
                self.lcd.icp.variant = match v {
                    "point_to_point" => IcpVariant::PointToPoint,
                    "point_to_plane" => IcpVariant::PointToPlane,
                    _ => {
                        return Err(Error::InvalidValue {
                            key: key.into(),
                            message: format!("`{v}` is not point_to_point or point_to_plane"),
                        })
                    }
                }
            }
            "icp.max_iterations" => self.lcd.icp.max_iterations = parse(key, v)?,
            "icp.max_distance" => self.lcd.icp.correspondence_distance = parse(key, v)?,
            "icp.epsilon" => self.lcd.icp.convergence_epsilon = parse(key, v)?,
            "lcd.threshold" => self.lcd.similarity_threshold = parse(key, v)?,
            "lcd.icp_fitness" => self.lcd.icp_fitness_threshold = parse(key, v)?,
            "lcd.exclusion" => self.lcd.exclusion = parse(key, v)?,
            "lcd.keyframe_stride" => self.lcd.keyframe_stride = parse(key, v)?,
            "lcd.method" => {
                self.lcd.method = v.parse::<PoseMethod>().map_err(|e| Error::InvalidValue {
                    key: key.into(),
                    message: e.to_string(),
                })?
            }
            "eval.loop_radius" => self.eval_loop_radius = parse(key, v)?,
            "eval.exclusion" => self.eval_exclusion = parse(key, v)?,
            "loss.margin" => self.loss.margin = parse(key, v)?,
            "loss.beta" => self.loss.beta = parse(key, v)?,
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Current value of `key` in the same syntax [`RunConfig::set`] accepts.
    pub fn get(&self, key: &str) -> Result<String> {
        let radii = || {
            let parts: Vec<String> = self.front_end.features.radii.iter().map(f64::to_string).collect();
            parts.join(",")
        };
        Ok(match key {
            "seed" => self.seed.to_string(),
            "voxel.size" => self.front_end.voxel.voxel_size.to_string(),
            "keypoints" => self.front_end.keypoints.to_string(),
            "features.radii" => radii(),
            "features.bins" => self.front_end.features.bins.to_string(),
            "features.normal_k" => self.front_end.features.normal_k.to_string(),
            "vlad.clusters" => self.vlad.clusters.to_string(),
            "vlad.output_dim" => self.vlad.output_dim.to_string(),
            "vlad.pca_dim" => self.vlad.pca_dim.to_string(),
            "vlad.within_regularization" => self.vlad.within_regularization.to_string(),
            "vlad.intra_normalization" => self.vlad.intra_normalization.to_string(),
            "vlad.pair_radius" => self.pair_radius.to_string(),
            "uot.lambda" => self.lcd.uot.lambda.to_string(),
            "uot.rho" => self.lcd.uot.rho.to_string(),
            "uot.iterations" => self.lcd.uot.iterations.to_string(),
            "ransac.iterations" => self.lcd.ransac.max_iterations.to_string(),
            "ransac.threshold" => self.lcd.ransac.inlier_threshold.to_string(),
            "ransac.sample_size" => self.lcd.ransac.sample_size.to_string(),
            "ransac.min_inlier_fraction" => self.lcd.ransac.min_inlier_fraction.to_string(),
            "ransac.mutual" => self.lcd.ransac.mutual_check.to_string(),
            "icp.variant" => variant_name(self.lcd.icp.variant).to_string(),
            "icp.max_iterations" => self.lcd.icp.max_iterations.to_string(),
            "icp.max_distance" => self.lcd.icp.correspondence_distance.to_string(),
            "icp.epsilon" => format!("{:e}", self.lcd.icp.convergence_epsilon),
            "lcd.threshold" => self.lcd.similarity_threshold.to_string(),
            "lcd.icp_fitness" => self.lcd.icp_fitness_threshold.to_string(),
            "lcd.exclusion" => self.lcd.exclusion.to_string(),
            "lcd.keyframe_stride" => self.lcd.keyframe_stride.to_string(),
            "lcd.method" => self.lcd.method.to_string(),
            "eval.loop_radius" => self.eval_loop_radius.to_string(),
            "eval.exclusion" => self.eval_exclusion.to_string(),
            "loss.margin" => self.loss.margin.to_string(),
            "loss.beta" => self.loss.beta.to_string(),
            _ => return Err(Error::UnknownKey(key.to_string())),
        })
    }

    /// Applies `key = value` lines on top of the current values. Blank lines
    /// and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    line: n + 1,
                    message: format!("expected `key = value`, found `{line}`"),
                });
            };
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Every key with its current value, one `key = value` line each.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for doc in KEYS {
            let value = self.get(doc.key).expect("documented key");
            let _ = writeln!(out, "{} = {}", doc.key, value);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.front_end.voxel.validate()?;
        self.front_end.features.validate()?;
        if self.front_end.keypoints == 0 {
            return Err(Error::invalid("keypoints", "must be positive"));
        }
        if !(self.pair_radius > 0.0) {
            return Err(Error::invalid("vlad.pair_radius", "must be positive"));
        }
        if !(self.eval_loop_radius > 0.0) {
            return Err(Error::invalid("eval.loop_radius", "must be positive"));
        }
        self.lcd.validate()?;
        self.loss.validate()
    }

    /// Loop-detection settings with the run seed applied.
    pub fn lcd_config(&self) -> LcdConfig {
        LcdConfig {
            seed: self.seed,
            ..self.lcd.clone()
        }
    }

    /// VLAD fitting settings with the run seed applied.
    pub fn vlad_fit(&self) -> VladFit {
        VladFit {
            seed: self.seed,
            ..self.vlad.clone()
        }
    }

    /// Help text listing every key with its default and unit.
    pub fn help() -> String {
        let mut out = String::from("Configuration keys (key = value):\n");
        for d in KEYS {
            let _ = writeln!(out, "  {:<28} default {:<15} [{}] {}", d.key, d.default, d.unit, d.help);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_defaults_match_the_default_config() {
        let cfg = RunConfig::default();
        for d in KEYS {
            let mut fresh = RunConfig::default();
            fresh.set(d.key, d.default).unwrap();
            assert_eq!(fresh, cfg, "key {}", d.key);
        }
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("seed = 9\nlcd.method = fast # comment\n\nicp.variant=point_to_plane\nfeatures.radii = 1, 3")
            .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.lcd.method, PoseMethod::Fast);
        assert_eq!(cfg.front_end.features.radii, vec![1.0, 3.0]);
        assert_eq!(RunConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(cfg.lcd_config().seed, 9);
        assert_eq!(cfg.vlad_fit().seed, 9);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(matches!(RunConfig::from_text("nope = 1"), Err(Error::UnknownKey(k)) if k == "nope"));
        assert!(matches!(
            RunConfig::from_text("keypoints = many"),
            Err(Error::InvalidValue { .. })
        ));
        assert!(matches!(
            RunConfig::from_text("keypoints"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(RunConfig::from_text("lcd.icp_fitness = 2").is_err());
        assert!(RunConfig::from_text("lcd.method = icp").is_err());
    }

    #[test]
    fn help_lists_every_key() {
        let help = RunConfig::help();
        for d in KEYS {
            assert!(help.contains(d.key) && help.contains(d.unit));
        }
        let cfg = RunConfig::default();
        for d in KEYS {
            cfg.get(d.key).unwrap();
        }
    }
}
