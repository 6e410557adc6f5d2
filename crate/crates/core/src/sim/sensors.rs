//! Sensor transfer models: ToF range, magnetic angle encoder, and FSR channels
//! read through a pull-down divider into a 12-bit ADC.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::model::{PullAttachment, TestbedKind};
use crate::sim::grip::GripContact;

pub const ADC_MAX: u16 = 4095;

/// Force-to-resistance characteristic of one FSR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum FsrCurve {
    /// `R = r0 / F`, `r0` in ohm-newtons.
    Inverse { r0: f64 },
    /// Calibration table of `(force N, resistance ohm)` pairs, force ascending and
    /// resistance strictly decreasing. Interpolated linearly, clamped at the ends.
    Table { points: Vec<(f64, f64)> },
}

impl FsrCurve {
    pub fn resistance(&self, force: f64) -> f64 {
        match self {
            FsrCurve::Inverse { r0 } => r0 / force,
            FsrCurve::Table { points } => {
                let first = points[0];
                let last = points[points.len() - 1];
                if force <= first.0 {
                    return first.1;
                }
                if force >= last.0 {
                    return last.1;
                }
                let i = points.partition_point(|p| p.0 <= force);
                let (f0, r0) = points[i - 1];
                let (f1, r1) = points[i];
                r0 + (r1 - r0) * (force - f0) / (f1 - f0)
            }
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match self {
            FsrCurve::Inverse { r0 } if *r0 > 0.0 => Ok(()),
            FsrCurve::Inverse { r0 } => Err(format!("FSR r0 must be positive, got {r0}")),
            FsrCurve::Table { points } => {
                if points.len() < 2 {
                    return Err("FSR calibration table needs at least two points".into());
                }
                let ok = points.windows(2).all(|w| w[1].0 > w[0].0 && w[1].1 < w[0].1)
                    && points.iter().all(|p| p.0 > 0.0 && p.1 > 0.0);
                if ok {
                    Ok(())
                } else {
                    Err("FSR calibration table must have ascending force and decreasing resistance".into())
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorParams {
    /// Master switch for every sensor noise source.
    pub noise: bool,
    pub tof_quantum_mm: f64,
    pub tof_sigma_mm: f64,
    pub encoder_bits: u32,
    pub encoder_sigma_deg: f64,
    pub fsr_curve: FsrCurve,
    pub pulldown_ohms: f64,
    /// Below this channel force the FSR reads as an open circuit.
    pub open_circuit_force: f64,
    pub fsr_count_sigma: f64,
    /// Width of the Gaussian kernel that spreads a contact over neighbouring
    /// channels through the silicone layer.
    pub spread_sigma_mm: f64,
}

impl Default for SensorParams {
    fn default() -> Self {
        SensorParams {
            noise: true,
            tof_quantum_mm: 1.0,
            tof_sigma_mm: 2.0,
            encoder_bits: 14,
            encoder_sigma_deg: 0.05,
            fsr_curve: FsrCurve::Inverse { r0: 6000.0 },
            pulldown_ohms: 10_000.0,
            open_circuit_force: 0.05,
            fsr_count_sigma: 2.0,
            spread_sigma_mm: 15.0,
        }
    }
}

impl SensorParams {
    pub fn noise_free() -> Self {
        SensorParams { noise: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.fsr_curve.validate()?;
        let positive = [
            ("tof_quantum_mm", self.tof_quantum_mm),
            ("pulldown_ohms", self.pulldown_ohms),
            ("open_circuit_force", self.open_circuit_force),
            ("spread_sigma_mm", self.spread_sigma_mm),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("tof_sigma_mm", self.tof_sigma_mm),
            ("encoder_sigma_deg", self.encoder_sigma_deg),
            ("fsr_count_sigma", self.fsr_count_sigma),
        ] {
            if !(v >= 0.0) {
                return Err(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(1..=24).contains(&self.encoder_bits) {
            return Err(format!("encoder_bits {} out of range", self.encoder_bits));
        }
        Ok(())
    }

    /// Noise-free divider reading for a single channel force.
    pub fn divider_counts(&self, force: f64) -> u16 {
        if !(force >= self.open_circuit_force) {
            return 0;
        }
        let r = self.fsr_curve.resistance(force);
        let v = f64::from(ADC_MAX) * self.pulldown_ohms / (self.pulldown_ohms + r);
        v.round().clamp(0.0, f64::from(ADC_MAX)) as u16
    }

    fn gaussian<R: Rng>(&self, rng: &mut R, sigma: f64) -> f64 {
        if !self.noise || sigma == 0.0 {
            return 0.0;
        }
        Normal::new(0.0, sigma).expect("sigma validated").sample(rng)
    }

    /// One ADC sample for a channel force, noise and clamping included.
    pub fn fsr_counts<R: Rng>(&self, force: f64, rng: &mut R) -> u16 {
        let clean = f64::from(self.divider_counts(force));
        let noisy = clean + self.gaussian(rng, self.fsr_count_sigma).round();
        noisy.clamp(0.0, f64::from(ADC_MAX)) as u16
    }

    /// Measured opening coordinate for the given true opening.
    pub fn measure_opening<R: Rng>(&self, testbed: TestbedKind, truth: f64, rng: &mut R) -> f64 {
        match testbed {
            TestbedKind::Drawer => {
                let q = self.tof_quantum_mm;
                let noisy = truth + self.gaussian(rng, self.tof_sigma_mm);
                (noisy / q).round() * q
            }
            TestbedKind::Door => {
                let q = 360.0 / f64::from(1u32 << self.encoder_bits);
                let noisy = truth + self.gaussian(rng, self.encoder_sigma_deg);
                (noisy / q).round() * q
            }
        }
    }
}

/// Force seen by every FSR channel: each contact's normal force spread over
/// the channels by a Gaussian kernel of the surface distance.
pub fn channel_forces(attachment: &PullAttachment, grip: Option<&GripContact>, spread_sigma_mm: f64) -> Vec<f64> {
    let mut forces = vec![0.0; attachment.channel_count()];
    let Some(grip) = grip else { return forces };
    let two_s2 = 2.0 * spread_sigma_mm * spread_sigma_mm;
    for contact in &grip.contacts {
        for (f, &pos) in forces.iter_mut().zip(&attachment.fsr_positions) {
            let d = attachment.surface.surface_distance(contact.point, pos);
            *f += contact.normal_force * (-d * d / two_s2).exp();
        }
    }
    forces
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ten_newtons_reads_3863() {
        // R = 6000/10 = 600 ohm; 4095 * 10000 / 10600 = 3863.207...
        let p = SensorParams::default();
        assert_eq!(p.divider_counts(10.0), 3863);
        assert_eq!(p.divider_counts(0.0), 0);
        assert_eq!(p.divider_counts(0.049), 0);
        // 0.05 N -> 120 kOhm -> 4095 * 10/130 = 315.0
        assert_eq!(p.divider_counts(0.05), 315);
    }

    #[test]
    fn table_curve_interpolates() {
        let c = FsrCurve::Table { points: vec![(1.0, 6000.0), (10.0, 600.0)] };
        c.validate().unwrap();
        assert_eq!(c.resistance(0.5), 6000.0);
        assert_eq!(c.resistance(5.5), 3300.0);
        assert_eq!(c.resistance(20.0), 600.0);
        assert!(FsrCurve::Table { points: vec![(1.0, 1.0), (2.0, 2.0)] }.validate().is_err());
    }

    #[test]
    fn drawer_measurement_stays_within_one_sigma_band() {
        let p = SensorParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut seen_inside = 0;
        for _ in 0..2000 {
            let m = p.measure_opening(TestbedKind::Drawer, 123.4, &mut rng);
            assert_eq!(m, m.round());
            if (m - 123.4).abs() <= p.tof_sigma_mm + 0.5 * p.tof_quantum_mm {
                seen_inside += 1;
            }
        }
        // Roughly 68% of samples fall within one sigma plus half a quantum, and more after rounding.
        assert!(seen_inside > 1300, "{seen_inside}");
        let quiet = SensorParams::noise_free();
        assert_eq!(quiet.measure_opening(TestbedKind::Drawer, 123.4, &mut rng), 123.0);
    }

    #[test]
    fn door_encoder_quantizes_to_14_bits() {
        let p = SensorParams::noise_free();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = 360.0 / 16384.0;
        let m = p.measure_opening(TestbedKind::Door, 45.01, &mut rng);
        assert!((m / q - (m / q).round()).abs() < 1e-9);
        assert!((m - 45.01).abs() <= q / 2.0 + 1e-12);
    }
}
