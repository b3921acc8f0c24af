//! Stereo sequence and ground-truth loaders (zero-padded frame layout with a
//! `times.txt`, 3x4 row-major pose lines).

use super::PipelineError;
use crate::dso_vo::image::Raster;
use crate::dso_vo::FrameData;
use crate::geometry::RigidTransform3;
use nalgebra::{Matrix3, Vector3};
use std::path::{Path, PathBuf};

/// Lazily indexed stereo sequence: frames are loaded from disk on demand.
#[derive(Debug, Clone)]
pub struct StereoSequence {
    lefts: Vec<PathBuf>,
    rights: Vec<PathBuf>,
    timestamps: Vec<f64>,
}

fn frame_path(dir: &Path, index: usize) -> Result<PathBuf, PipelineError> {
    for ext in ["png", "pgm"] {
        let p = dir.join(format!("{index:06}.{ext}"));
        if p.exists() {
            return Ok(p);
        }
    }
    Err(PipelineError::Dataset(format!(
        "missing frame {index} in {} (looked for {index:06}.png/.pgm)",
        dir.display()
    )))
}

impl StereoSequence {
    /// Indexes a sequence directory: `image_0/` (left), `image_1/` (right),
    /// and `times.txt` with one timestamp per line.
    pub fn open(root: &Path) -> Result<Self, PipelineError> {
        let times_path = root.join("times.txt");
        let times_text = std::fs::read_to_string(&times_path).map_err(|e| {
            PipelineError::Dataset(format!("cannot read {}: {e}", times_path.display()))
        })?;
        let mut timestamps = Vec::new();
        for (i, line) in times_text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let t: f64 = line.parse().map_err(|_| {
                PipelineError::Dataset(format!("times.txt line {}: bad timestamp '{line}'", i + 1))
            })?;
            if let Some(prev) = timestamps.last() {
                if t <= *prev {
                    return Err(PipelineError::Dataset(format!(
                        "times.txt line {}: timestamp {t} not after {prev}",
                        i + 1
                    )));
                }
            }
            timestamps.push(t);
        }
        let left_dir = root.join("image_0");
        let right_dir = root.join("image_1");
        let mut lefts = Vec::with_capacity(timestamps.len());
        let mut rights = Vec::with_capacity(timestamps.len());
        for i in 0..timestamps.len() {
            lefts.push(frame_path(&left_dir, i)?);
            rights.push(frame_path(&right_dir, i)?);
        }
        Ok(Self {
            lefts,
            rights,
            timestamps,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    /// Loads stereo pair `index`, checking the two images agree in size.
    pub fn frame(&self, index: usize) -> Result<FrameData, PipelineError> {
        let left = Raster::load(&self.lefts[index])
            .map_err(|e| PipelineError::Dataset(format!("frame {index}: {e}")))?;
        let right = Raster::load(&self.rights[index])
            .map_err(|e| PipelineError::Dataset(format!("frame {index}: {e}")))?;
        FrameData::new(left, right, self.timestamps[index])
            .map_err(|e| PipelineError::Dataset(format!("frame {index}: {e}")))
    }
}

/// Parses ground-truth poses: 12 whitespace-separated reals per line,
/// row-major 3x4 camera-to-world. Rotations drifted past 1e-6 from SO(3)
/// are re-orthonormalized (logged).
pub fn load_ground_truth(path: &Path) -> Result<Vec<RigidTransform3>, PipelineError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| PipelineError::Dataset(format!("cannot read {}: {e}", path.display())))?;
    parse_ground_truth(&text)
}

pub fn parse_ground_truth(text: &str) -> Result<Vec<RigidTransform3>, PipelineError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| {
                PipelineError::Dataset(format!("pose line {}: non-numeric field", i + 1))
            })?;
        if vals.len() != 12 {
            return Err(PipelineError::Dataset(format!(
                "pose line {}: expected 12 numbers, got {}",
                i + 1,
                vals.len()
            )));
        }
        let rotation = Matrix3::new(
            vals[0], vals[1], vals[2], vals[4], vals[5], vals[6], vals[8], vals[9], vals[10],
        );
        let translation = Vector3::new(vals[3], vals[7], vals[11]);
        let pose = match RigidTransform3::new(rotation, translation) {
            Ok(p) => p,
            Err(e) => {
                // The pose type enforces a tighter tolerance than the loader
                // contract; only drift past 1e-6 is worth reporting.
                let defect = (rotation.transpose() * rotation - Matrix3::identity())
                    .abs()
                    .max();
                if defect > 1e-6 {
                    log::warn!("pose line {}: rotation re-orthonormalized ({e})", i + 1);
                }
                repair(rotation, translation)
            }
        };
        out.push(pose);
    }
    Ok(out)
}

fn repair(rotation: Matrix3<f64>, translation: Vector3<f64>) -> RigidTransform3 {
    let svd = rotation.svd(true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u2 = u;
        u2.column_mut(2).neg_mut();
        r = u2 * v_t;
    }
    RigidTransform3::new(r, translation).expect("projected rotation is orthonormal")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::synth::{synthesize_world, transform_line, SynthSpec};

    #[test]
    fn loads_synthesized_sequence_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec::Photometric {
            frames: 3,
            dt: 0.1,
            velocity: nalgebra::Vector3::new(0.0, 0.0, 0.1),
            yaw_rate: 0.0,
            affine_a: 0.0,
            affine_b: 0.0,
        };
        synthesize_world(&spec, 1, dir.path()).unwrap();
        let seq = StereoSequence::open(dir.path()).unwrap();
        assert_eq!(seq.len(), 3);
        let f0 = seq.frame(0).unwrap();
        let f2 = seq.frame(2).unwrap();
        assert_eq!(f0.timestamp, 0.0);
        assert!((f2.timestamp - 0.2).abs() < 1e-12);
        assert_eq!(f0.left.width(), 320);
    }

    #[test]
    fn missing_right_image_names_the_index() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec::Photometric {
            frames: 2,
            dt: 0.1,
            velocity: nalgebra::Vector3::zeros(),
            yaw_rate: 0.0,
            affine_a: 0.0,
            affine_b: 0.0,
        };
        synthesize_world(&spec, 1, dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("image_1/000001.pgm")).unwrap();
        let err = StereoSequence::open(dir.path()).unwrap_err();
        assert!(err.to_string().contains("missing frame 1"), "{err}");
    }

    #[test]
    fn non_monotone_times_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("image_0")).unwrap();
        std::fs::create_dir_all(dir.path().join("image_1")).unwrap();
        std::fs::write(dir.path().join("times.txt"), "0.0\n0.0\n").unwrap();
        let err = StereoSequence::open(dir.path()).unwrap_err();
        assert!(err.to_string().contains("not after"), "{err}");
    }

    #[test]
    fn identity_pose_line_parses() {
        let poses = parse_ground_truth("1 0 0 0 0 1 0 0 0 0 1 0\n").unwrap();
        assert_eq!(poses.len(), 1);
        assert_eq!(poses[0].translation(), &Vector3::zeros());
    }

    #[test]
    fn eleven_fields_report_line_number() {
        let err = parse_ground_truth("1 0 0 0 0 1 0 0 0 0 1\n").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
        let err = parse_ground_truth(
            "1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0 0 0 1 0 0 0 0 1\n",
        )
        .unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn translation_poses_round_trip_through_export() {
        let poses = vec![
            RigidTransform3::from_translation(Vector3::new(1.5, -0.25, 3.0)),
            RigidTransform3::from_translation(Vector3::new(-2.0, 0.5, 10.0)),
        ];
        let text: String = poses
            .iter()
            .map(|p| format!("{}\n", transform_line(p)))
            .collect();
        let back = parse_ground_truth(&text).unwrap();
        for (a, b) in poses.iter().zip(&back) {
            assert_eq!(a.translation(), b.translation());
            assert_eq!(a.rotation(), b.rotation());
        }
    }

    #[test]
    fn drifted_rotation_is_repaired() {
        let poses = parse_ground_truth("1.0001 0 0 0 0 1 0 0 0 0 1 0\n").unwrap();
        let r = poses[0].rotation();
        let defect = (r.transpose() * r - Matrix3::identity()).abs().max();
        assert!(defect < 1e-9);
    }
}
