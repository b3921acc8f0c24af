//! Semi-metric topological experience map.
//!
//! Experiences are planar poses (x, y, theta) created from odometry;
//! links carry the relative constraint between consecutive experiences or a
//! zero-distance loop-closure constraint. Global optimization is iteratively
//! reweighted Gauss-Newton with Levenberg damping under a Huber loss, with
//! experience 0 pinned as the gauge.

use nalgebra::{DMatrix, DVector};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MapError {
    #[error("experience id {0} does not exist")]
    UnknownExperience(usize),
    #[error("loop closure endpoints must differ, both were {0}")]
    SelfLoop(usize),
}

/// Wraps an angle to `[-pi, pi)`.
pub fn wrap_angle(theta: f64) -> f64 {
    let t = (theta + PI).rem_euclid(2.0 * PI);
    let t = if t >= 2.0 * PI { 0.0 } else { t };
    t - PI
}

/// A vertex of the cognitive map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Experience {
    pub id: usize,
    pub x: f64,
    pub y: f64,
    /// Heading in `[-pi, pi)`.
    pub theta: f64,
    pub template_id: usize,
    pub hd_phase: f64,
    pub grid_phase: (f64, f64),
    pub timestamp: f64,
    // Odometry pose at creation time; links are built from differences of
    // these so later optimization cannot corrupt new constraints.
    odom_x: f64,
    odom_y: f64,
    odom_theta: f64,
}

/// A constrained edge between two experiences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExperienceLink {
    pub from_id: usize,
    pub to_id: usize,
    /// Metric separation in meters, >= 0.
    pub d: f64,
    /// Direction of travel relative to the source heading.
    pub heading_rad: f64,
    /// Heading change from source to target.
    pub facing_rad: f64,
    /// Time between the linked experiences, seconds.
    pub dt: f64,
}

/// Result summary of one optimization call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizeReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub converged: bool,
}

/// The experience graph plus the robust-loss scale used when optimizing.
#[derive(Debug, Clone)]
pub struct MapGraph {
    experiences: Vec<Experience>,
    links: Vec<ExperienceLink>,
    /// Huber threshold on the mixed residual norm.
    pub robust_delta: f64,
    /// Meters per radian applied to the angle residual before the shared
    /// Huber norm.
    pub angle_scale: f64,
}

impl Default for MapGraph {
    fn default() -> Self {
        Self::new(1.0, 1.0)
    }
}

/// Odometric pose handed to `add_experience`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdomPose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl MapGraph {
    pub fn new(robust_delta: f64, angle_scale: f64) -> Self {
        Self {
            experiences: Vec::new(),
            links: Vec::new(),
            robust_delta,
            angle_scale,
        }
    }

    pub fn experiences(&self) -> &[Experience] {
        &self.experiences
    }

    pub fn links(&self) -> &[ExperienceLink] {
        &self.links
    }

    #[cfg(test)]
    pub(crate) fn experiences_mut_for_test(&mut self, f: impl FnOnce(&mut [Experience])) {
        f(&mut self.experiences);
    }

    pub fn len(&self) -> usize {
        self.experiences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experiences.is_empty()
    }

    /// Appends an experience at the current odometry pose and links it to
    /// `prev_id`. The root experience carries no link. The new map pose is
    /// the previous experience's (possibly optimized) pose composed with the
    /// odometric displacement, which coincides with the odometry pose while
    /// the graph is unoptimized.
    pub fn add_experience(
        &mut self,
        odom: OdomPose,
        template_id: usize,
        hd_phase: f64,
        grid_phase: (f64, f64),
        timestamp: f64,
        prev_id: Option<usize>,
    ) -> Result<usize, MapError> {
        let id = self.experiences.len();
        let (pose, link) = match prev_id {
            None => ((odom.x, odom.y, wrap_angle(odom.theta)), None),
            Some(prev_id) => {
                let prev = *self
                    .experiences
                    .get(prev_id)
                    .ok_or(MapError::UnknownExperience(prev_id))?;
                let dx = odom.x - prev.odom_x;
                let dy = odom.y - prev.odom_y;
                let d = (dx * dx + dy * dy).sqrt();
                let heading_rad = if d > 0.0 {
                    wrap_angle(dy.atan2(dx) - prev.odom_theta)
                } else {
                    0.0
                };
                let facing_rad = wrap_angle(odom.theta - prev.odom_theta);
                let dt = timestamp - prev.timestamp;
                let dir = prev.theta + heading_rad;
                let pose = (
                    prev.x + d * dir.cos(),
                    prev.y + d * dir.sin(),
                    wrap_angle(prev.theta + facing_rad),
                );
                let link = ExperienceLink {
                    from_id: prev_id,
                    to_id: id,
                    d,
                    heading_rad,
                    facing_rad,
                    dt,
                };
                (pose, Some(link))
            }
        };
        self.experiences.push(Experience {
            id,
            x: pose.0,
            y: pose.1,
            theta: pose.2,
            template_id,
            hd_phase,
            grid_phase,
            timestamp,
            odom_x: odom.x,
            odom_y: odom.y,
            odom_theta: wrap_angle(odom.theta),
        });
        if let Some(link) = link {
            self.links.push(link);
        }
        Ok(id)
    }

    /// Adds a zero-distance loop-closure link declaring `current_id` and
    /// `matched_id` the same place, with the template shift supplying the
    /// relative facing. Duplicate identical links are ignored.
    pub fn close_loop(
        &mut self,
        current_id: usize,
        matched_id: usize,
        relative_facing: f64,
    ) -> Result<Option<ExperienceLink>, MapError> {
        if current_id == matched_id {
            return Err(MapError::SelfLoop(current_id));
        }
        if current_id >= self.experiences.len() {
            return Err(MapError::UnknownExperience(current_id));
        }
        if matched_id >= self.experiences.len() {
            return Err(MapError::UnknownExperience(matched_id));
        }
        let link = ExperienceLink {
            from_id: matched_id,
            to_id: current_id,
            d: 0.0,
            heading_rad: 0.0,
            facing_rad: wrap_angle(relative_facing),
            dt: 0.0,
        };
        if self.links.iter().any(|l| {
            l.from_id == link.from_id
                && l.to_id == link.to_id
                && l.d == link.d
                && l.heading_rad == link.heading_rad
                && l.facing_rad == link.facing_rad
        }) {
            return Ok(None);
        }
        self.links.push(link);
        Ok(Some(link))
    }

    /// True when every experience is reachable from experience 0.
    pub fn is_connected(&self) -> bool {
        if self.experiences.is_empty() {
            return true;
        }
        let n = self.experiences.len();
        let mut adj = vec![Vec::new(); n];
        for l in &self.links {
            adj[l.from_id].push(l.to_id);
            adj[l.to_id].push(l.from_id);
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut count = 1;
        while let Some(v) = stack.pop() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    count += 1;
                    stack.push(w);
                }
            }
        }
        count == n
    }

    /// Total robust cost `0.5 * sum rho(|r|^2)` over all links.
    pub fn total_cost(&self) -> f64 {
        self.links
            .iter()
            .map(|l| {
                let r = residual_scaled(
                    &self.experiences[l.from_id],
                    &self.experiences[l.to_id],
                    l,
                    self.angle_scale,
                );
                0.5 * huber_rho(r.norm_squared(), self.robust_delta)
            })
            .sum()
    }

    /// Globally relaxes all experience poses except the gauge (experience 0)
    /// by iteratively reweighted Gauss-Newton with Levenberg damping.
    pub fn optimize(&mut self, max_iterations: usize) -> OptimizeReport {
        let n = self.experiences.len();
        if n <= 1 || self.links.is_empty() {
            return OptimizeReport {
                iterations: 0,
                initial_cost: 0.0,
                final_cost: 0.0,
                converged: true,
            };
        }
        let dof = 3 * (n - 1);
        let initial_cost = self.total_cost();
        let mut cost = initial_cost;
        let mut lambda = 0.0f64;
        let mut converged = false;
        let mut iterations = 0;

        for _ in 0..max_iterations {
            iterations += 1;
            let mut h = DMatrix::<f64>::zeros(dof, dof);
            let mut g = DVector::<f64>::zeros(dof);
            for l in &self.links {
                let ei = &self.experiences[l.from_id];
                let ej = &self.experiences[l.to_id];
                let r = residual_scaled(ei, ej, l, self.angle_scale);
                let w = huber_weight(r.norm(), self.robust_delta);
                let (ja, jb) = residual_jacobians(ei, l, self.angle_scale);
                accumulate_block(&mut h, &mut g, l.from_id, l.to_id, &ja, &jb, &r, w);
            }

            let mut accepted = false;
            for _retry in 0..=8 {
                let mut damped = h.clone();
                for i in 0..dof {
                    damped[(i, i)] += lambda;
                }
                let step = match damped.cholesky() {
                    Some(ch) => ch.solve(&(-&g)),
                    None => {
                        lambda = (lambda * 10.0).max(1e-8);
                        continue;
                    }
                };
                let saved: Vec<(f64, f64, f64)> = self.experiences[1..]
                    .iter()
                    .map(|e| (e.x, e.y, e.theta))
                    .collect();
                for (k, e) in self.experiences[1..].iter_mut().enumerate() {
                    e.x += step[3 * k];
                    e.y += step[3 * k + 1];
                    e.theta = wrap_angle(e.theta + step[3 * k + 2]);
                }
                let new_cost = self.total_cost();
                if new_cost <= cost {
                    let decrease = cost - new_cost;
                    cost = new_cost;
                    lambda /= 10.0;
                    if lambda < 1e-12 {
                        lambda = 0.0;
                    }
                    accepted = true;
                    if decrease <= 1e-9 * cost.max(1e-30) {
                        converged = true;
                    }
                    break;
                }
                // Revert and damp harder.
                for (k, e) in self.experiences[1..].iter_mut().enumerate() {
                    e.x = saved[k].0;
                    e.y = saved[k].1;
                    e.theta = saved[k].2;
                }
                lambda = (lambda * 10.0).max(1e-8);
            }
            if !accepted || converged {
                converged = converged || !accepted && cost <= initial_cost;
                break;
            }
        }
        OptimizeReport {
            iterations,
            initial_cost,
            final_cost: cost,
            converged,
        }
    }
}

/// Raw (unscaled) link residual per the link constraint model:
/// `[x_j - x_i - d cos(th_i + heading); y_j - y_i - d sin(th_i + heading);
/// wrap(th_j - th_i - facing)]`.
pub fn residual(e_i: &Experience, e_j: &Experience, link: &ExperienceLink) -> [f64; 3] {
    let dir = e_i.theta + link.heading_rad;
    [
        e_j.x - e_i.x - link.d * dir.cos(),
        e_j.y - e_i.y - link.d * dir.sin(),
        wrap_angle(e_j.theta - e_i.theta - link.facing_rad),
    ]
}

fn residual_scaled(
    e_i: &Experience,
    e_j: &Experience,
    link: &ExperienceLink,
    angle_scale: f64,
) -> nalgebra::Vector3<f64> {
    let r = residual(e_i, e_j, link);
    nalgebra::Vector3::new(r[0], r[1], angle_scale * r[2])
}

/// Jacobians of the scaled residual w.r.t. the source and target pose.
fn residual_jacobians(
    e_i: &Experience,
    link: &ExperienceLink,
    angle_scale: f64,
) -> (nalgebra::Matrix3<f64>, nalgebra::Matrix3<f64>) {
    let dir = e_i.theta + link.heading_rad;
    let ja = nalgebra::Matrix3::new(
        -1.0,
        0.0,
        link.d * dir.sin(),
        0.0,
        -1.0,
        -link.d * dir.cos(),
        0.0,
        0.0,
        -angle_scale,
    );
    let jb = nalgebra::Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, angle_scale);
    (ja, jb)
}

fn huber_rho(sq_norm: f64, delta: f64) -> f64 {
    if sq_norm <= delta * delta {
        sq_norm
    } else {
        2.0 * delta * sq_norm.sqrt() - delta * delta
    }
}

fn huber_weight(norm: f64, delta: f64) -> f64 {
    if norm <= delta {
        1.0
    } else {
        delta / norm
    }
}

/// Adds one link's weighted Gauss-Newton contribution into the normal
/// equations; experience 0 has no state columns.
fn accumulate_block(
    h: &mut DMatrix<f64>,
    g: &mut DVector<f64>,
    from_id: usize,
    to_id: usize,
    ja: &nalgebra::Matrix3<f64>,
    jb: &nalgebra::Matrix3<f64>,
    r: &nalgebra::Vector3<f64>,
    w: f64,
) {
    let idx = |id: usize| -> Option<usize> { (id > 0).then(|| 3 * (id - 1)) };
    let blocks = [(idx(from_id), ja), (idx(to_id), jb)];
    for (oi, ji) in blocks {
        let Some(oi) = oi else { continue };
        let jtr = ji.transpose() * r * w;
        for a in 0..3 {
            g[oi + a] += jtr[a];
        }
        for (oj, jj) in blocks {
            let Some(oj) = oj else { continue };
            let jtj = ji.transpose() * jj * w;
            for a in 0..3 {
                for b in 0..3 {
                    h[(oi + a, oj + b)] += jtj[(a, b)];
                }
            }
        }
    }
}
