//! Gripper contact on the pull attachment and the friction-cone slip model.

use serde::{Deserialize, Serialize};

use crate::model::{PullAttachment, Vec3};

/// Contacts further than this from the attachment surface are rejected.
pub const SURFACE_TOLERANCE_MM: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Contact {
    /// Attachment frame, millimetres.
    pub point: Vec3,
    /// Newtons, never negative.
    pub normal_force: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GripContact {
    pub contacts: Vec<Contact>,
    /// Pull load currently shared by the contacts, newtons.
    #[serde(default)]
    pub tangential_load: f64,
    pub friction_coefficient: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlipParams {
    /// Speed at which slipping contacts slide along the surface, mm/s.
    pub slip_rate_mm_s: f64,
    /// Normal forces are multiplied by this factor for every `decay_period_s` of slip.
    pub decay_factor: f64,
    pub decay_period_s: f64,
}

impl Default for SlipParams {
    fn default() -> Self {
        SlipParams { slip_rate_mm_s: 20.0, decay_factor: 0.9, decay_period_s: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transmission {
    pub transmitted: f64,
    pub slipping: bool,
}

impl GripContact {
    pub fn total_normal(&self) -> f64 {
        self.contacts.iter().map(|c| c.normal_force).sum()
    }

    /// Largest pull the grip can carry before slipping.
    pub fn friction_limit(&self) -> f64 {
        self.friction_coefficient * self.total_normal()
    }

    pub fn validate(&self, attachment: &PullAttachment) -> Result<(), String> {
        if !(self.friction_coefficient >= 0.0) || !self.friction_coefficient.is_finite() {
            return Err(format!("friction coefficient {} invalid", self.friction_coefficient));
        }
        for (i, c) in self.contacts.iter().enumerate() {
            if !(c.normal_force >= 0.0) || !c.normal_force.is_finite() {
                return Err(format!("contact {i}: normal force {} invalid", c.normal_force));
            }
            if c.point.iter().any(|v| !v.is_finite()) {
                return Err(format!("contact {i}: non-finite point"));
            }
            let d = attachment.surface.distance_to(c.point);
            if d > SURFACE_TOLERANCE_MM {
                return Err(format!("contact {i} is {d:.2} mm off the attachment surface"));
            }
        }
        Ok(())
    }

    /// Carries `commanded` newtons of pull through the grip for `dt` seconds.
    ///
    /// Inside the friction cone the full command is transmitted. Outside it the
    /// transmitted load saturates at the cone (either sign), the contacts slide toward the pull
    /// side of the attachment and their normal forces decay.
    pub fn transmit(
        &mut self,
        attachment: &PullAttachment,
        commanded: f64,
        dt: f64,
        slip: &SlipParams,
    ) -> Transmission {
        let limit = self.friction_limit();
        if commanded.abs() <= limit {
            self.tangential_load = commanded;
            return Transmission { transmitted: commanded, slipping: false };
        }
        let limit = limit.copysign(commanded);
        self.tangential_load = limit;
        let decay = slip.decay_factor.powf(dt / slip.decay_period_s);
        let slide = slip.slip_rate_mm_s * dt;
        for c in &mut self.contacts {
            c.normal_force *= decay;
            c.point = attachment.surface.slide_toward_pull(c.point, slide);
        }
        Transmission { transmitted: limit, slipping: true }
    }
}

/// How a manipulator holds and drives the pull attachment in simulation.
///
/// The arm tracks a target handle displacement with an impedance law whose
/// output is capped by `force_limit`; the result is the commanded pull that
/// the grip then has to transmit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmCoupling {
    #[serde(default)]
    pub grip: Option<GripContact>,
    /// Target handle displacement along the opening direction, mm.
    pub target_mm: f64,
    /// Target velocity, mm/s. The sim extrapolates the target between updates.
    #[serde(default)]
    pub target_velocity: f64,
    /// N/m
    pub stiffness: f64,
    /// N*s/m
    pub damping: f64,
    /// Upper bound on the commanded pull, N.
    pub force_limit: f64,
    /// Force pushed into the testbed (backwards), N. Used for safety checks.
    #[serde(default)]
    pub inward_force: f64,
}

impl ArmCoupling {
    pub fn validate(&self, attachment: &PullAttachment) -> Result<(), String> {
        for (name, v) in [
            ("target_mm", self.target_mm),
            ("target_velocity", self.target_velocity),
            ("stiffness", self.stiffness),
            ("damping", self.damping),
            ("force_limit", self.force_limit),
            ("inward_force", self.inward_force),
        ] {
            if !v.is_finite() {
                return Err(format!("{name} is not finite"));
            }
        }
        if self.stiffness < 0.0 || self.damping < 0.0 || self.force_limit < 0.0 || self.inward_force < 0.0 {
            return Err("gains and forces must be non-negative".into());
        }
        if let Some(g) = &self.grip {
            g.validate(attachment)?;
        }
        Ok(())
    }

    /// Pull the arm asks for given the current handle displacement and velocity.
    /// Negative values hold the handle back.
    pub fn demand(&self, handle_mm: f64, handle_velocity_mm_s: f64) -> f64 {
        let f = self.stiffness * (self.target_mm - handle_mm) / 1000.0
            + self.damping * (self.target_velocity - handle_velocity_mm_s) / 1000.0;
        f.clamp(-self.force_limit, self.force_limit)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HANDLE_RADIUS_MM;

    fn grip(total: f64, mu: f64) -> GripContact {
        GripContact {
            contacts: vec![
                Contact { point: [-HANDLE_RADIUS_MM, 0.0, 12.5], normal_force: total / 2.0 },
                Contact { point: [HANDLE_RADIUS_MM, 0.0, 0.0], normal_force: total / 2.0 },
            ],
            tangential_load: 0.0,
            friction_coefficient: mu,
        }
    }

    #[test]
    fn inside_cone_transmits_command() {
        let h = PullAttachment::handle();
        let mut g = grip(40.0, 0.8);
        let t = g.transmit(&h, 20.0, 0.001, &SlipParams::default());
        assert_eq!(t, Transmission { transmitted: 20.0, slipping: false });
        assert_eq!(g.total_normal(), 40.0);
    }

    #[test]
    fn outside_cone_saturates_and_slips() {
        let h = PullAttachment::handle();
        let mut g = grip(10.0, 0.8);
        let t = g.transmit(&h, 20.0, 0.001, &SlipParams::default());
        assert!(t.slipping);
        assert!((t.transmitted - 8.0).abs() < 1e-12);
        assert!(g.total_normal() < 10.0);
    }

    #[test]
    fn slip_decays_by_point_nine_per_100ms() {
        let h = PullAttachment::handle();
        let mut g = grip(10.0, 0.8);
        for _ in 0..100 {
            g.transmit(&h, 100.0, 0.001, &SlipParams::default());
        }
        assert!((g.total_normal() - 9.0).abs() < 1e-9);
        g.validate(&h).unwrap();
    }

    #[test]
    fn contacts_off_surface_rejected() {
        let h = PullAttachment::handle();
        let mut g = grip(10.0, 0.8);
        g.contacts[0].point = [-HANDLE_RADIUS_MM - 3.0, 0.0, 0.0];
        assert!(g.validate(&h).is_err());
        g.contacts[0].point = [-HANDLE_RADIUS_MM - 1.5, 0.0, 0.0];
        assert!(g.validate(&h).is_ok());
        g.contacts[0].normal_force = -1.0;
        assert!(g.validate(&h).is_err());
    }
}
