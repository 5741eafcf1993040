//! Synthetic merge trips.
//!
//! A car leaves a stop line near `x0_mean` metres and accelerates toward a
//! cruising speed. Acceleration follows
//! `a' = decay * a + gain * (target - v) + jerk_sd * N(0, 1)`, with `jerk_sd`
//! drawn uniformly per trip, so trips range from smooth to jerky. Recorded
//! distance and speed carry additive Gaussian measurement noise; the `jerk`
//! channel is the backward difference of the true acceleration.

use fpd_core::datakit::{Sample, TrajectorySet, Trip};
use fpd_core::evaluation::rollout_rng;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::GeneratorConfig;
use crate::error::CliResult;

pub const JERK_CHANNEL: &str = "jerk";

fn trip(cfg: &GeneratorConfig, seed: u64, index: usize) -> Trip {
    let mut rng = rollout_rng(seed, index as u64);
    let u: f64 = rng.random();
    let mut normal = || -> f64 { rng.sample(StandardNormal) };
    let jerk_sd = cfg.jerk_sd_min + (cfg.jerk_sd_max - cfg.jerk_sd_min) * u;
    let mut x = cfg.x0_mean + cfg.x0_sd * normal();
    let mut v = (cfg.v0_mean + cfg.v0_sd * normal()).max(0.0);
    let mut a = 0.0;
    let mut samples = Vec::with_capacity(cfg.samples);
    for i in 0..cfg.samples {
        let next_a = cfg.accel_decay * a + cfg.speed_gain * (cfg.target_speed - v) + jerk_sd * normal();
        let jerk = (next_a - a) / cfg.dt;
        samples.push(Sample {
            t: i as f64 * cfg.dt,
            x: x + cfg.position_noise * normal(),
            u: v + cfg.speed_noise * normal(),
            extras: vec![jerk],
        });
        x += v * cfg.dt + 0.5 * a * cfg.dt * cfg.dt;
        v = (v + a * cfg.dt).max(0.0);
        a = next_a;
    }
    Trip {
        trip_id: format!("trip_{index:03}"),
        samples,
    }
}

/// Trip `i` depends only on `(seed, i)`.
pub fn generate(cfg: &GeneratorConfig, seed: u64) -> CliResult<TrajectorySet> {
    let trips = (0..cfg.trip_count).map(|i| trip(cfg, seed, i)).collect();
    Ok(TrajectorySet::new(vec![JERK_CHANNEL.into()], trips)?)
}
