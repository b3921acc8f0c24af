//! Bayesian attractor network of head-direction and grid cells.
//!
//! Each network carries two Gaussian activity packets: an integrator bump
//! driven by self-motion and a calibration bump driven by visual cues. Both
//! are parameterized by a mean phase and a precision weight (1/sigma^2).
//! The head-direction network lives on a ring, the grid network on a torus.
//! Bumps are advanced by path integration, fused by precision-weighted
//! circular averaging, and kept stable by mutual plus global inhibition.

use crate::geometry::PlanarVelocity;
use std::f64::consts::TAU;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AttractorError {
    #[error("invalid attractor config: {0}")]
    InvalidConfig(String),
    #[error("bump weight must be positive, got {0}")]
    NonPositiveWeight(f64),
}

/// Wraps a phase to `[0, period)`.
pub fn wrap_phase(phase: f64, period: f64) -> f64 {
    let p = phase.rem_euclid(period);
    // rem_euclid can return the period itself when phase is a tiny negative.
    if p >= period {
        0.0
    } else {
        p
    }
}

/// Shortest signed distance from `a` to `b` on a circle of `period`,
/// in `[-period/2, period/2)`.
pub fn circular_diff(a: f64, b: f64, period: f64) -> f64 {
    let d = (b - a).rem_euclid(period);
    if d >= period / 2.0 {
        d - period
    } else {
        d
    }
}

/// Absolute circular distance between two phases.
pub fn circular_dist(a: f64, b: f64, period: f64) -> f64 {
    circular_diff(a, b, period).abs()
}

/// Gaussian activity packet on a ring: mean phase and precision weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RingBump {
    /// Phase in `[0, 2*pi)`.
    pub mu: f64,
    /// Precision `1/sigma^2`, strictly positive.
    pub weight: f64,
}

impl RingBump {
    pub fn new(mu: f64, weight: f64) -> Result<Self, AttractorError> {
        if weight <= 0.0 {
            return Err(AttractorError::NonPositiveWeight(weight));
        }
        Ok(Self {
            mu: wrap_phase(mu, TAU),
            weight,
        })
    }
}

/// Gaussian activity packet on a torus: independent ring bumps per axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TorusBump {
    pub mu_x: f64,
    pub mu_y: f64,
    pub weight_x: f64,
    pub weight_y: f64,
}

impl TorusBump {
    pub fn new(mu_x: f64, mu_y: f64, weight_x: f64, weight_y: f64) -> Result<Self, AttractorError> {
        if weight_x <= 0.0 {
            return Err(AttractorError::NonPositiveWeight(weight_x));
        }
        if weight_y <= 0.0 {
            return Err(AttractorError::NonPositiveWeight(weight_y));
        }
        Ok(Self {
            mu_x: wrap_phase(mu_x, TAU),
            mu_y: wrap_phase(mu_y, TAU),
            weight_x,
            weight_y,
        })
    }
}

/// Network parameters. None of these are dictated by the dynamics; all are
/// configurable with the defaults below.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttractorConfig {
    /// Total precision energy `E` shared by integrator and calibration cells.
    pub total_energy: f64,
    /// Mutual-inhibition intensity applied to the integrator weight.
    pub delta_inte: f64,
    /// Mutual-inhibition intensity applied to the calibration weight.
    pub delta_cali: f64,
    /// Familiarity decision threshold, radians.
    pub familiarity_threshold: f64,
    /// Lower clamp for precisions; keeps inhibition from driving them negative.
    pub weight_floor: f64,
    /// Radians of torus phase per meter of travel.
    pub grid_gain: f64,
}

impl Default for AttractorConfig {
    fn default() -> Self {
        Self {
            total_energy: 2.0,
            delta_inte: 0.05,
            delta_cali: 0.05,
            familiarity_threshold: 0.1,
            weight_floor: 1e-6,
            grid_gain: TAU / 40.0,
        }
    }
}

impl AttractorConfig {
    pub fn validate(&self) -> Result<(), AttractorError> {
        if self.total_energy <= 0.0 {
            return Err(AttractorError::InvalidConfig(format!(
                "total_energy must be positive, got {}",
                self.total_energy
            )));
        }
        if !(0.0..1.0).contains(&self.delta_inte) || !(0.0..1.0).contains(&self.delta_cali) {
            return Err(AttractorError::InvalidConfig(
                "mutual inhibition deltas must lie in [0, 1)".into(),
            ));
        }
        if self.familiarity_threshold <= 0.0 {
            return Err(AttractorError::InvalidConfig(
                "familiarity_threshold must be positive".into(),
            ));
        }
        if self.weight_floor <= 0.0 || self.total_energy < 2.0 * self.weight_floor {
            return Err(AttractorError::InvalidConfig(
                "weight_floor must be positive and at most total_energy / 2".into(),
            ));
        }
        if self.grid_gain <= 0.0 {
            return Err(AttractorError::InvalidConfig(
                "grid_gain must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Full network state: one ring pair for head direction, one torus pair for
/// position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkState {
    pub hd_integrator: RingBump,
    pub hd_calibration: RingBump,
    pub grid_integrator: TorusBump,
    pub grid_calibration: TorusBump,
}

impl NetworkState {
    /// Both networks at phase zero with the energy split evenly.
    pub fn initial(cfg: &AttractorConfig) -> Self {
        let w = cfg.total_energy / 2.0;
        Self {
            hd_integrator: RingBump { mu: 0.0, weight: w },
            hd_calibration: RingBump { mu: 0.0, weight: w },
            grid_integrator: TorusBump {
                mu_x: 0.0,
                mu_y: 0.0,
                weight_x: w,
                weight_y: w,
            },
            grid_calibration: TorusBump {
                mu_x: 0.0,
                mu_y: 0.0,
                weight_x: w,
                weight_y: w,
            },
        }
    }
}

/// Visual cue to inject into the calibration cells.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cue {
    pub hd_phase: f64,
    pub grid_phase: (f64, f64),
    pub inject_weight: f64,
}

/// Output of one attractor cycle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutput {
    pub state: NetworkState,
    pub hd_estimate: f64,
    pub grid_estimate: (f64, f64),
    pub loop_closed: bool,
}

/// Precision-weighted fusion of two circular Gaussians.
///
/// The second mean is first shifted by a whole number of periods to the
/// representative nearest the first mean; a plain arithmetic weighted mean
/// mod period is wrong at the wrap point.
pub fn fuse_circular(a: (f64, f64), b: (f64, f64), period: f64) -> (f64, f64) {
    let (mu_a, w_a) = a;
    let (mu_b, w_b) = b;
    let mu_b_near = mu_a + circular_diff(mu_a, mu_b, period);
    let weight = w_a + w_b;
    let mu = wrap_phase((mu_a * w_a + mu_b_near * w_b) / weight, period);
    (mu, weight)
}

/// Renormalizes the two precisions to share exactly `total_energy`.
pub fn global_inhibition(inte_w: f64, cali_w: f64, total_energy: f64) -> (f64, f64) {
    let sum = inte_w + cali_w;
    let inte = total_energy * inte_w / sum;
    // Subtracting keeps inte + cali == total_energy exactly.
    (inte, total_energy - inte)
}

/// Cross-suppression between integrator and calibration precisions, both
/// updates reading the pre-step weights. Results are clamped at `floor`.
pub fn mutual_inhibition(
    inte_w: f64,
    cali_w: f64,
    delta_inte: f64,
    delta_cali: f64,
    floor: f64,
) -> (f64, f64) {
    (
        (inte_w - delta_inte * cali_w).max(floor),
        (cali_w - delta_cali * inte_w).max(floor),
    )
}

/// Advances a ring bump by `omega * dt` without deforming it.
pub fn path_integrate_ring(bump: &RingBump, omega: f64, dt: f64) -> RingBump {
    RingBump {
        mu: wrap_phase(bump.mu + omega * dt, TAU),
        weight: bump.weight,
    }
}

/// Advances a torus bump by the planar displacement `speed * dt` along
/// `heading`, scaled into phase by `grid_gain`.
pub fn path_integrate_torus(
    bump: &TorusBump,
    heading: f64,
    speed: f64,
    dt: f64,
    grid_gain: f64,
) -> TorusBump {
    let step = grid_gain * speed * dt;
    TorusBump {
        mu_x: wrap_phase(bump.mu_x + step * heading.cos(), TAU),
        mu_y: wrap_phase(bump.mu_y + step * heading.sin(), TAU),
        weight_x: bump.weight_x,
        weight_y: bump.weight_y,
    }
}

/// Injects cue energy into a ring calibration bump.
pub fn inject_cue_ring(cali: &RingBump, inject_mu: f64, inject_weight: f64) -> RingBump {
    let (mu, weight) = fuse_circular((cali.mu, cali.weight), (inject_mu, inject_weight), TAU);
    RingBump { mu, weight }
}

/// Injects cue energy into a torus calibration bump, per axis.
pub fn inject_cue_torus(cali: &TorusBump, inject_mu: (f64, f64), inject_weight: f64) -> TorusBump {
    let (mu_x, weight_x) = fuse_circular(
        (cali.mu_x, cali.weight_x),
        (inject_mu.0, inject_weight),
        TAU,
    );
    let (mu_y, weight_y) = fuse_circular(
        (cali.mu_y, cali.weight_y),
        (inject_mu.1, inject_weight),
        TAU,
    );
    TorusBump {
        mu_x,
        mu_y,
        weight_x,
        weight_y,
    }
}

/// Fused phase estimate of a ring network and the familiarity decision.
pub fn estimate_phase_ring(inte: &RingBump, cali: &RingBump, threshold: f64) -> (f64, f64, bool) {
    let (mu_cc, w_cc) = fuse_circular((inte.mu, inte.weight), (cali.mu, cali.weight), TAU);
    let familiar = circular_dist(mu_cc, cali.mu, TAU) < threshold;
    (mu_cc, w_cc, familiar)
}

/// Fused phase estimate of a torus network; familiar only if every axis is
/// within the threshold.
pub fn estimate_phase_torus(
    inte: &TorusBump,
    cali: &TorusBump,
    threshold: f64,
) -> ((f64, f64), (f64, f64), bool) {
    let (mu_x, w_x) = fuse_circular((inte.mu_x, inte.weight_x), (cali.mu_x, cali.weight_x), TAU);
    let (mu_y, w_y) = fuse_circular((inte.mu_y, inte.weight_y), (cali.mu_y, cali.weight_y), TAU);
    let familiar = circular_dist(mu_x, cali.mu_x, TAU) < threshold
        && circular_dist(mu_y, cali.mu_y, TAU) < threshold;
    ((mu_x, mu_y), (w_x, w_y), familiar)
}

fn inhibit(inte_w: f64, cali_w: f64, cfg: &AttractorConfig) -> (f64, f64) {
    let (i, c) = mutual_inhibition(
        inte_w,
        cali_w,
        cfg.delta_inte,
        cfg.delta_cali,
        cfg.weight_floor,
    );
    let (i, c) = global_inhibition(i, c, cfg.total_energy);
    // Global inhibition preserves the exact energy split; a pathological
    // weight ratio can still land under the floor, so pin it while keeping
    // the sum at total_energy.
    if i < cfg.weight_floor {
        (cfg.weight_floor, cfg.total_energy - cfg.weight_floor)
    } else if c < cfg.weight_floor {
        (cfg.total_energy - cfg.weight_floor, cfg.weight_floor)
    } else {
        (i, c)
    }
}

/// Runs one full network cycle: path integration, optional cue injection,
/// inhibition, and phase estimation.
///
/// The cycle order is: (1) integrate the HD ring with the rotational
/// velocity, (2) fuse an HD heading estimate, (3) integrate the grid torus
/// along that heading, (4) inject the cue if present, (5) mutual then global
/// inhibition, (6) estimate phases and decide familiarity. A loop closes
/// when both networks report familiar while a cue was active; the fused
/// phase is then copied into the integrator means.
pub fn step(
    state: &NetworkState,
    cfg: &AttractorConfig,
    vel: &PlanarVelocity,
    cue: Option<Cue>,
) -> StepOutput {
    let mut s = *state;

    // (1) HD path integration on both bumps.
    s.hd_integrator = path_integrate_ring(&s.hd_integrator, vel.rotational, vel.dt);
    s.hd_calibration = path_integrate_ring(&s.hd_calibration, vel.rotational, vel.dt);

    // (2) heading for the grid displacement comes from the fused HD phase.
    let (heading, _) = fuse_circular(
        (s.hd_integrator.mu, s.hd_integrator.weight),
        (s.hd_calibration.mu, s.hd_calibration.weight),
        TAU,
    );

    // (3) grid path integration on both bumps.
    s.grid_integrator = path_integrate_torus(
        &s.grid_integrator,
        heading,
        vel.translational,
        vel.dt,
        cfg.grid_gain,
    );
    s.grid_calibration = path_integrate_torus(
        &s.grid_calibration,
        heading,
        vel.translational,
        vel.dt,
        cfg.grid_gain,
    );

    // (4) cue injection into the calibration cells.
    if let Some(cue) = cue {
        s.hd_calibration = inject_cue_ring(&s.hd_calibration, cue.hd_phase, cue.inject_weight);
        s.grid_calibration =
            inject_cue_torus(&s.grid_calibration, cue.grid_phase, cue.inject_weight);
    }

    // (5) inhibition on both networks' weights.
    let (hd_i, hd_c) = inhibit(s.hd_integrator.weight, s.hd_calibration.weight, cfg);
    s.hd_integrator.weight = hd_i;
    s.hd_calibration.weight = hd_c;
    let (gx_i, gx_c) = inhibit(s.grid_integrator.weight_x, s.grid_calibration.weight_x, cfg);
    s.grid_integrator.weight_x = gx_i;
    s.grid_calibration.weight_x = gx_c;
    let (gy_i, gy_c) = inhibit(s.grid_integrator.weight_y, s.grid_calibration.weight_y, cfg);
    s.grid_integrator.weight_y = gy_i;
    s.grid_calibration.weight_y = gy_c;

    // (6) phase estimates and the familiarity decision.
    let (hd_mu, _, hd_familiar) = estimate_phase_ring(
        &s.hd_integrator,
        &s.hd_calibration,
        cfg.familiarity_threshold,
    );
    let (grid_mu, _, grid_familiar) = estimate_phase_torus(
        &s.grid_integrator,
        &s.grid_calibration,
        cfg.familiarity_threshold,
    );
    if hd_familiar {
        s.hd_integrator.mu = hd_mu;
    }
    if grid_familiar {
        s.grid_integrator.mu_x = grid_mu.0;
        s.grid_integrator.mu_y = grid_mu.1;
    }

    StepOutput {
        state: s,
        hd_estimate: hd_mu,
        grid_estimate: grid_mu,
        loop_closed: cue.is_some() && hd_familiar && grid_familiar,
    }
}
