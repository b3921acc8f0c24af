//! Local view cells: compact scene descriptors learned one-shot and matched
//! against later views to trigger calibration cues.
//!
//! A descriptor is the image block-averaged down to a small grid, mean
//! subtracted and max-abs normalized, which makes matching invariant to
//! affine brightness changes. Matching slides the stored template left and
//! right by a few columns so small heading offsets at a revisit still score.

use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LocalViewError {
    #[error("descriptor source image is empty")]
    EmptyImage,
    #[error("descriptor grid {rows}x{cols} is invalid")]
    BadGrid { rows: usize, cols: usize },
}

/// Normalized intensity profile on a fixed rows x cols grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewDescriptor {
    pub values: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

/// A learned scene bound to the network phases it was seen at.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewTemplate {
    pub id: usize,
    pub descriptor: ViewDescriptor,
    pub hd_phase: f64,
    pub grid_phase: (f64, f64),
    pub experience_id: usize,
}

/// Successful template match.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemplateMatch {
    pub template_id: usize,
    /// Column shift applied to the stored template; positive means the
    /// template content sits to the right of the current view.
    pub shift: i32,
    pub distance: f64,
}

/// Append-only store of learned templates.
#[derive(Debug, Clone, Default)]
pub struct TemplateStore {
    templates: Vec<ViewTemplate>,
}

/// Block-averages a grayscale image to `rows x cols`, removes the mean, and
/// scales so the largest magnitude is 1. A constant image yields all zeros.
pub fn build_descriptor(
    pixels: &[f64],
    width: usize,
    height: usize,
    rows: usize,
    cols: usize,
) -> Result<ViewDescriptor, LocalViewError> {
    if width == 0 || height == 0 || pixels.len() != width * height {
        return Err(LocalViewError::EmptyImage);
    }
    if rows == 0 || cols == 0 || rows > height || cols > width {
        return Err(LocalViewError::BadGrid { rows, cols });
    }
    let mut values = vec![0.0f64; rows * cols];
    for r in 0..rows {
        let y0 = r * height / rows;
        let y1 = ((r + 1) * height / rows).max(y0 + 1);
        for c in 0..cols {
            let x0 = c * width / cols;
            let x1 = ((c + 1) * width / cols).max(x0 + 1);
            let mut sum = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    sum += pixels[y * width + x];
                }
            }
            values[r * cols + c] = sum / ((y1 - y0) * (x1 - x0)) as f64;
        }
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    for v in &mut values {
        *v -= mean;
    }
    let max_abs = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max_abs > 0.0 {
        for v in &mut values {
            *v /= max_abs;
        }
    }
    Ok(ViewDescriptor { values, rows, cols })
}

/// Mean absolute difference between `template` shifted by `shift` columns
/// and `current`, over the overlapping columns.
fn shifted_distance(template: &ViewDescriptor, current: &ViewDescriptor, shift: i32) -> f64 {
    debug_assert_eq!(template.rows, current.rows);
    debug_assert_eq!(template.cols, current.cols);
    let cols = current.cols as i32;
    let c_lo = 0.max(-shift);
    let c_hi = cols.min(cols - shift);
    if c_hi <= c_lo {
        return f64::INFINITY;
    }
    let mut sum = 0.0;
    for r in 0..current.rows {
        let row_t = &template.values[r * template.cols..(r + 1) * template.cols];
        let row_c = &current.values[r * current.cols..(r + 1) * current.cols];
        for c in c_lo..c_hi {
            sum += (row_t[(c + shift) as usize] - row_c[c as usize]).abs();
        }
    }
    sum / (current.rows as f64 * (c_hi - c_lo) as f64)
}

impl TemplateStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&ViewTemplate> {
        self.templates.get(id)
    }

    pub fn templates(&self) -> &[ViewTemplate] {
        &self.templates
    }

    /// Finds the best template within `max_shift` columns whose distance
    /// beats `threshold`. Ties break on lowest template id, then smallest
    /// |shift|, negative shift before positive.
    pub fn find_match(
        &self,
        current: &ViewDescriptor,
        max_shift: u32,
        threshold: f64,
    ) -> Option<TemplateMatch> {
        let mut best: Option<TemplateMatch> = None;
        for template in &self.templates {
            if template.descriptor.rows != current.rows || template.descriptor.cols != current.cols
            {
                continue;
            }
            for shift in -(max_shift as i32)..=(max_shift as i32) {
                let distance = shifted_distance(&template.descriptor, current, shift);
                let better = match &best {
                    None => true,
                    Some(b) => {
                        distance < b.distance
                            || (distance == b.distance
                                && (shift.abs() < b.shift.abs()
                                    || (shift.abs() == b.shift.abs() && shift < b.shift)))
                    }
                };
                if better {
                    best = Some(TemplateMatch {
                        template_id: template.id,
                        shift,
                        distance,
                    });
                }
            }
        }
        best.filter(|m| m.distance < threshold)
    }

    /// Appends a template, binding the descriptor to the given phases and
    /// experience. Ids are dense and creation-ordered.
    pub fn learn(
        &mut self,
        descriptor: ViewDescriptor,
        hd_phase: f64,
        grid_phase: (f64, f64),
        experience_id: usize,
    ) -> usize {
        let id = self.templates.len();
        self.templates.push(ViewTemplate {
            id,
            descriptor,
            hd_phase,
            grid_phase,
            experience_id,
        });
        id
    }

    /// Rebinds a template to a new experience (used when the matched
    /// experience was replaced during map maintenance). Currently only
    /// needed by tests, kept for symmetry with learn.
    pub fn set_experience(&mut self, template_id: usize, experience_id: usize) {
        if let Some(t) = self.templates.get_mut(template_id) {
            t.experience_id = experience_id;
        }
    }

    /// Writes one line per template: id, phases, experience id, then the
    /// descriptor values.
    pub fn dump<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for t in &self.templates {
            write!(
                out,
                "{} {} {} {} {}",
                t.id, t.hd_phase, t.grid_phase.0, t.grid_phase.1, t.experience_id
            )?;
            for v in &t.descriptor.values {
                write!(out, " {v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Converts a matched column shift to a relative heading offset given the
/// camera's horizontal field of view and the descriptor width.
///
/// A camera yaw of +delta (phase convention of the attractor) moves scene
/// content right in the image by `delta / fov_per_col` columns, which the
/// matcher reports as a negative shift, hence the sign flip.
pub fn shift_to_heading(shift: i32, horizontal_fov: f64, cols: usize) -> f64 {
    -(shift as f64) * horizontal_fov / cols as f64
}
