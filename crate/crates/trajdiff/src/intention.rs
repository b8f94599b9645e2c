//! Motion intention: definition, labeling from trajectories, numeric
//! encoding, and the regression loss for the learned estimator.
//!
//! Intentions are categorical on two axes: lateral (turn left / keep
//! direction / turn right) and longitudinal (accelerate / normal /
//! decelerate). Labels are derived in a body frame aligned with the mean
//! observed heading, so they are invariant to global rotation of the scene:
//! the lateral coordinate is the left-positive axis perpendicular to the
//! heading, the longitudinal coordinate points along it. The lateral velocity
//! is the mean first difference of the lateral coordinate over the chosen
//! segment; the longitudinal acceleration is the mean second difference of
//! the longitudinal coordinate.

use crate::error::{Error, Result};
use crate::trajdata::TrajectoryWindow;
use serde::{Deserialize, Serialize};

/// Displacement below which the observed heading is considered undefined.
pub const DEGENERATE_HEADING_EPS: f64 = 1e-9;

/// Decision thresholds for the two intention axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntentionThresholds {
    /// Lateral velocity above which the label is a left turn, m/s.
    pub v_lt: f64,
    /// Lateral velocity below which the label is a right turn, m/s.
    pub v_rt: f64,
    /// Longitudinal acceleration above which the label is accelerating, m/s^2.
    pub a_acc: f64,
    /// Longitudinal acceleration below which the label is decelerating, m/s^2.
    pub a_dec: f64,
}

impl Default for IntentionThresholds {
    fn default() -> Self {
        IntentionThresholds {
            v_lt: 0.2,
            v_rt: -0.2,
            a_acc: 0.5,
            a_dec: -0.5,
        }
    }
}

impl IntentionThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.v_lt > self.v_rt && self.a_acc > self.a_dec) {
            return Err(Error::validation(
                "thresholds must satisfy v_lt > v_rt and a_acc > a_dec",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Lateral {
    Lt,
    Kd,
    Rt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Longitudinal {
    Acc,
    Nor,
    Dec,
}

/// Categorical intention: one value per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IntentionLabel {
    pub lateral: Lateral,
    pub longitudinal: Longitudinal,
}

impl IntentionLabel {
    pub const ALL: [IntentionLabel; 9] = {
        let mut out = [IntentionLabel {
            lateral: Lateral::Lt,
            longitudinal: Longitudinal::Acc,
        }; 9];
        let lats = [Lateral::Lt, Lateral::Kd, Lateral::Rt];
        let lons = [Longitudinal::Acc, Longitudinal::Nor, Longitudinal::Dec];
        let mut i = 0;
        while i < 3 {
            let mut j = 0;
            while j < 3 {
                out[i * 3 + j] = IntentionLabel {
                    lateral: lats[i],
                    longitudinal: lons[j],
                };
                j += 1;
            }
            i += 1;
        }
        out
    };
}

/// Numeric intention as fed to the networks: two reals.
///
/// Encoded labels use exactly `{+1, 0, -1}` per axis; estimator outputs are
/// unconstrained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntentionVector {
    pub lateral_code: f64,
    pub longitudinal_code: f64,
}

impl IntentionVector {
    pub fn new(lateral_code: f64, longitudinal_code: f64) -> Self {
        IntentionVector {
            lateral_code,
            longitudinal_code,
        }
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.lateral_code, self.longitudinal_code]
    }
}

/// Maps a label to its numeric codes: left/accelerate to `+1`, keep/normal to
/// `0`, right/decelerate to `-1`.
pub fn encode(label: IntentionLabel) -> IntentionVector {
    let lat = match label.lateral {
        Lateral::Lt => 1.0,
        Lateral::Kd => 0.0,
        Lateral::Rt => -1.0,
    };
    let lon = match label.longitudinal {
        Longitudinal::Acc => 1.0,
        Longitudinal::Nor => 0.0,
        Longitudinal::Dec => -1.0,
    };
    IntentionVector::new(lat, lon)
}

/// Inverse of [`encode`] by nearest code; exact on encoded labels.
pub fn decode(v: IntentionVector) -> IntentionLabel {
    let lateral = if v.lateral_code > 0.5 {
        Lateral::Lt
    } else if v.lateral_code < -0.5 {
        Lateral::Rt
    } else {
        Lateral::Kd
    };
    let longitudinal = if v.longitudinal_code > 0.5 {
        Longitudinal::Acc
    } else if v.longitudinal_code < -0.5 {
        Longitudinal::Dec
    } else {
        Longitudinal::Nor
    };
    IntentionLabel {
        lateral,
        longitudinal,
    }
}

/// Which part of a window the derivatives are taken over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Observed,
    Future,
}

/// Body-frame derivative estimates for one window segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BodyFrameDerivatives {
    /// Mean lateral velocity, m/s; positive is leftward.
    pub v_la: f64,
    /// Mean longitudinal acceleration, m/s^2.
    pub a_lo: f64,
    /// True when the observed displacement was too small to define a heading
    /// and the +x axis was used instead.
    pub degenerate_heading: bool,
}

/// Rotates the chosen segment into the observed-heading body frame and
/// returns the mean first difference of the lateral coordinate over `dt`
/// and the mean second difference of the longitudinal coordinate over
/// `dt^2`.
pub fn body_frame_derivatives(
    window: &TrajectoryWindow,
    segment: Segment,
    dt: f64,
) -> Result<BodyFrameDerivatives> {
    if dt <= 0.0 || !dt.is_finite() {
        return Err(Error::validation("dt must be positive and finite"));
    }
    let points: &[[f64; 2]] = match segment {
        Segment::Observed => &window.obs,
        Segment::Future => &window.fut,
    };
    if points.len() < 3 {
        return Err(Error::validation(format!(
            "segment needs at least 3 points, got {}",
            points.len()
        )));
    }
    window.check_finite()?;

    let first = window.obs.first().expect("non-empty obs");
    let last = window.last_obs();
    let disp = [last[0] - first[0], last[1] - first[1]];
    let norm = (disp[0] * disp[0] + disp[1] * disp[1]).sqrt();
    let degenerate = norm < DEGENERATE_HEADING_EPS;
    let (cos_h, sin_h) = if degenerate {
        (1.0, 0.0)
    } else {
        (disp[0] / norm, disp[1] / norm)
    };

    // Rotate by the negative heading: longitudinal along the heading,
    // lateral positive to the left of it.
    let lon: Vec<f64> = points.iter().map(|p| cos_h * p[0] + sin_h * p[1]).collect();
    let lat: Vec<f64> = points.iter().map(|p| -sin_h * p[0] + cos_h * p[1]).collect();

    let n = points.len();
    let mean_first_diff = (lat[n - 1] - lat[0]) / (n - 1) as f64;
    let mut second_sum = 0.0;
    for i in 2..n {
        second_sum += lon[i] - 2.0 * lon[i - 1] + lon[i - 2];
    }
    let mean_second_diff = second_sum / (n - 2) as f64;

    Ok(BodyFrameDerivatives {
        v_la: mean_first_diff / dt,
        a_lo: mean_second_diff / (dt * dt),
        degenerate_heading: degenerate,
    })
}

/// Lateral label from a lateral velocity; boundary values keep direction.
pub fn label_lateral(v_la: f64, th: &IntentionThresholds) -> Lateral {
    if v_la > th.v_lt {
        Lateral::Lt
    } else if v_la < th.v_rt {
        Lateral::Rt
    } else {
        Lateral::Kd
    }
}

/// Longitudinal label from a longitudinal acceleration; boundaries are normal.
pub fn label_longitudinal(a_lo: f64, th: &IntentionThresholds) -> Longitudinal {
    if a_lo > th.a_acc {
        Longitudinal::Acc
    } else if a_lo < th.a_dec {
        Longitudinal::Dec
    } else {
        Longitudinal::Nor
    }
}

/// Labels a window's segment: derivatives in the body frame, then the two
/// threshold rules.
pub fn label_window(
    window: &TrajectoryWindow,
    segment: Segment,
    th: &IntentionThresholds,
    dt: f64,
) -> Result<(IntentionLabel, BodyFrameDerivatives)> {
    th.validate()?;
    let d = body_frame_derivatives(window, segment, dt)?;
    let label = IntentionLabel {
        lateral: label_lateral(d.v_la, th),
        longitudinal: label_longitudinal(d.a_lo, th),
    };
    Ok((label, d))
}

/// Mean squared error between predicted and target intention vectors,
/// averaged over the batch and both components.
pub fn intention_loss(predicted: &[IntentionVector], target: &[IntentionVector]) -> Result<f64> {
    if predicted.len() != target.len() {
        return Err(Error::validation(format!(
            "batch length mismatch: {} predicted vs {} target",
            predicted.len(),
            target.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::validation("intention loss on empty batch"));
    }
    let mut sum = 0.0;
    for (p, t) in predicted.iter().zip(target.iter()) {
        let dl = p.lateral_code - t.lateral_code;
        let dn = p.longitudinal_code - t.longitudinal_code;
        sum += dl * dl + dn * dn;
    }
    Ok(sum / (2.0 * predicted.len() as f64))
}
