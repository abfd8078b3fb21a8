//! Channel quality: three-regime path loss times Rayleigh fast fading.

use rand::Rng;
use rand_distr::{Distribution, Open01};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{classify_geometry, GridMap, PairPose, Point, Regime};

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Path-loss constants, stored in dB as they are usually quoted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathLossConfig {
    pub rho_db: f64,
    pub xi_db: f64,
    pub exponent: f64,
    /// Distance to an intersection under which perpendicular lanes still see each other (m).
    pub near_threshold: f64,
}

impl Default for PathLossConfig {
    fn default() -> Self {
        Self { rho_db: -68.5, xi_db: -54.5, exponent: 1.61, near_threshold: 15.0 }
    }
}

impl PathLossConfig {
    pub fn params(&self) -> PathLossParams {
        PathLossParams {
            rho: db_to_linear(self.rho_db),
            xi: db_to_linear(self.xi_db),
            exponent: self.exponent,
            near_threshold: self.near_threshold,
        }
    }
}

/// Linear path-loss constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathLossParams {
    pub rho: f64,
    pub xi: f64,
    pub exponent: f64,
    pub near_threshold: f64,
}

impl PathLossParams {
    /// Checks positivity and the consistency bound `xi < rho * (phi0 / 2)^e`.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.rho > 0.0 && self.xi > 0.0 && self.exponent > 0.0 && self.near_threshold > 0.0) {
            out.push(format!("path-loss constants must be positive: {self:?}"));
        }
        let bound = self.rho * (self.near_threshold / 2.0).powf(self.exponent);
        if !(self.xi < bound) {
            out.push(format!(
                "NLOS constant xi = {:e} must be below rho * (phi0/2)^e = {:e}",
                self.xi, bound
            ));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

/// Path-loss power gain between two points under a given regime.
pub fn path_loss_between(tx: Point, rx: Point, regime: Regime, params: &PathLossParams) -> Result<f64> {
    let dx = (tx.x - rx.x).abs();
    let dy = (tx.y - rx.y).abs();
    let (scale, span) = match regime {
        Regime::Los => (params.rho, dx.hypot(dy)),
        Regime::Wlos => (params.rho, dx + dy),
        Regime::Nlos => (params.xi, dx * dy),
    };
    if !(span > 0.0) {
        return Err(Error::DegenerateGeometry(format!(
            "{regime:?} pair with |dx| = {dx}, |dy| = {dy}"
        )));
    }
    Ok(scale * span.powf(-params.exponent))
}

pub fn path_loss(pose: &PairPose, regime: Regime, params: &PathLossParams) -> Result<f64> {
    path_loss_between(pose.tx(), pose.rx(), regime, params)
}

/// How the Rayleigh draw enters the power gain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FadingModel {
    /// Squared unit-scale Rayleigh amplitude (exponential, mean 2).
    #[default]
    PowerGain,
    /// The raw unit-scale Rayleigh amplitude.
    Amplitude,
    /// No fading; every factor is 1.
    Disabled,
}

/// Unit-scale Rayleigh amplitude by inversion.
pub fn rayleigh_amplitude<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = Open01.sample(rng);
    (-2.0 * u.ln()).sqrt()
}

impl FadingModel {
    pub fn sample<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        match self {
            FadingModel::PowerGain => {
                let u: f64 = Open01.sample(rng);
                -2.0 * u.ln()
            }
            FadingModel::Amplitude => rayleigh_amplitude(rng),
            FadingModel::Disabled => 1.0,
        }
    }
}

/// Per-channel power gains of one pair in one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelGains(Vec<f64>);

impl ChannelGains {
    pub fn new(gains: Vec<f64>) -> Result<Self> {
        if let Some(&bad) = gains.iter().find(|g| !(g.is_finite() && **g > 0.0)) {
            return Err(Error::InvalidGain(bad));
        }
        Ok(Self(gains))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn get(&self, channel: usize) -> f64 {
        self.0[channel]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Classifies the pose, evaluates the path loss and multiplies in an
/// independent fading factor per channel.
pub fn draw_gains<R: Rng + ?Sized>(
    pose: &PairPose,
    map: &GridMap,
    params: &PathLossParams,
    fading: FadingModel,
    channels: usize,
    rng: &mut R,
) -> Result<ChannelGains> {
    if channels == 0 {
        return Err(Error::InvalidState("at least one channel is required".into()));
    }
    let regime = classify_geometry(pose, map, params.near_threshold);
    let h = path_loss(pose, regime, params)?;
    // Deep fades can underflow the product; clamp to the smallest positive normal.
    let gains = (0..channels).map(|_| (fading.sample(rng) * h).max(f64::MIN_POSITIVE)).collect();
    ChannelGains::new(gains)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Heading, Lane};
    use crate::rng::{derive, Stream};

    fn table() -> PathLossParams {
        PathLossConfig::default().params()
    }

    #[test]
    fn los_twenty_metres() {
        let h = path_loss_between(Point::new(0.0, 0.0), Point::new(20.0, 0.0), Regime::Los, &table()).unwrap();
        let hand = 10f64.powf(-6.85) * 20f64.powf(-1.61);
        assert!((h - 1.136e-9).abs() / 1.136e-9 < 0.01);
        assert!((h - hand).abs() / hand < 1e-12);
    }

    #[test]
    fn wlos_matches_los_at_manhattan_distance() {
        let p = table();
        let w = path_loss_between(Point::new(0.0, 0.0), Point::new(12.0, 8.0), Regime::Wlos, &p).unwrap();
        let l = path_loss_between(Point::new(0.0, 0.0), Point::new(20.0, 0.0), Regime::Los, &p).unwrap();
        assert!((w - l).abs() / l < 1e-12);
    }

    #[test]
    fn nlos_zero_difference_is_degenerate() {
        let r = path_loss_between(Point::new(3.0, 0.0), Point::new(3.0, 9.0), Regime::Nlos, &table());
        assert!(matches!(r, Err(Error::DegenerateGeometry(_))));
    }

    #[test]
    fn table_constants_satisfy_bound() {
        let p = table();
        assert!(p.validate().is_ok());
        let lhs = p.xi;
        let rhs = p.rho * 7.5f64.powf(1.61);
        assert!((lhs - 3.548e-6).abs() < 1e-9 && (rhs - 3.621e-6).abs() < 1e-9);
        let bad = PathLossParams { xi: p.xi * 1.1, ..p };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn monotone_in_distance() {
        let p = table();
        for regime in [Regime::Los, Regime::Wlos, Regime::Nlos] {
            let mut prev = f64::INFINITY;
            for d in 1..100 {
                let d = d as f64;
                let h = path_loss_between(Point::new(0.0, 0.0), Point::new(d, d), regime, &p).unwrap();
                assert!(h < prev);
                prev = h;
            }
        }
    }

    #[test]
    fn disabled_fading_gives_path_loss() {
        let map = GridMap::default();
        let pose = PairPose::new(&map, Lane::new(Heading::East, 1), 100.0, 20.0).unwrap();
        let mut rng = derive(0, Stream::Mobility, 0);
        let g = draw_gains(&pose, &map, &table(), FadingModel::Disabled, 3, &mut rng).unwrap();
        let h = path_loss(&pose, Regime::Los, &table()).unwrap();
        assert!(g.as_slice().iter().all(|&x| x == h));
    }

    #[test]
    fn rayleigh_mean_and_channel_independence() {
        let mut rng = derive(42, Stream::Mobility, 0);
        let n = 1_000_000;
        let mean = (0..n).map(|_| rayleigh_amplitude(&mut rng)).sum::<f64>() / n as f64;
        assert!((mean - (std::f64::consts::PI / 2.0).sqrt()).abs() < 0.01, "mean {mean}");

        let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let a = FadingModel::PowerGain.sample(&mut rng);
            let b = FadingModel::PowerGain.sample(&mut rng);
            sa += a;
            sb += b;
            saa += a * a;
            sbb += b * b;
            sab += a * b;
        }
        let nf = n as f64;
        let cov = sab / nf - (sa / nf) * (sb / nf);
        let corr = cov / ((saa / nf - (sa / nf).powi(2)).sqrt() * (sbb / nf - (sb / nf).powi(2)).sqrt());
        assert!(corr.abs() < 0.01, "corr {corr}");
        assert!((sa / nf - 2.0).abs() < 0.02);
    }
}
