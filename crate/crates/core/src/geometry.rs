//! Pose arithmetic and the robot-centric / object-centric frame transforms.
//!
//! Orientations are unit quaternions stored as `(w, x, y, z)` with `w >= 0`.
//! The object frame is translation-only: objects are rotationally symmetric
//! (balls) or their orientation is not tracked (cube), so only the tip
//! position is re-expressed relative to the object.

use serde::{Deserialize, Serialize};

use crate::data::{Action, State};
use crate::error::{Error, Result};

/// Largest admissible chopstick opening angle (radians).
pub const OPENING_MAX: f64 = 1.0;

/// Inputs to [`quat_distance`] must be unit-norm within this tolerance.
pub const UNIT_TOLERANCE: f64 = 1e-6;

pub type Vec3 = [f64; 3];

#[inline]
pub fn add3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale3(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot3(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm3(a: Vec3) -> f64 {
    dot3(a, a).sqrt()
}

#[inline]
pub fn dist3(a: Vec3, b: Vec3) -> f64 {
    norm3(sub3(a, b))
}

/// Unit quaternion `(w, x, y, z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quat(pub [f64; 4]);

impl Quat {
    pub const IDENTITY: Quat = Quat([1.0, 0.0, 0.0, 0.0]);

    /// Rotation of `angle` radians about `axis` (need not be normalized).
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Quat {
        let n = norm3(axis);
        if n == 0.0 {
            return Quat::IDENTITY;
        }
        let (s, c) = (angle * 0.5).sin_cos();
        let k = s / n;
        Quat([c, axis[0] * k, axis[1] * k, axis[2] * k]).canonical()
    }

    /// Intrinsic yaw about z followed by tilt about the rotated y axis.
    pub fn from_yaw_tilt(yaw: f64, tilt: f64) -> Quat {
        Quat::from_axis_angle([0.0, 0.0, 1.0], yaw).mul(Quat::from_axis_angle([0.0, 1.0, 0.0], tilt))
    }

    #[inline]
    pub fn w(&self) -> f64 {
        self.0[0]
    }

    #[inline]
    pub fn dot(&self, other: &Quat) -> f64 {
        self.0[0] * other.0[0] + self.0[1] * other.0[1] + self.0[2] * other.0[2] + self.0[3] * other.0[3]
    }

    #[inline]
    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn neg(&self) -> Quat {
        Quat([-self.0[0], -self.0[1], -self.0[2], -self.0[3]])
    }

    /// Hamilton product `self * rhs`.
    pub fn mul(&self, rhs: Quat) -> Quat {
        let [a1, b1, c1, d1] = self.0;
        let [a2, b2, c2, d2] = rhs.0;
        Quat([
            a1 * a2 - b1 * b2 - c1 * c2 - d1 * d2,
            a1 * b2 + b1 * a2 + c1 * d2 - d1 * c2,
            a1 * c2 - b1 * d2 + c1 * a2 + d1 * b2,
            a1 * d2 + b1 * c2 - c1 * b2 + d1 * a2,
        ])
    }

    /// Flip sign so that `w >= 0`. Ties at `w == 0` are broken on the first
    /// nonzero vector component so the representative is unique.
    pub fn canonical(self) -> Quat {
        let q = self.0;
        let flip = if q[0] != 0.0 {
            q[0] < 0.0
        } else {
            q[1..].iter().find(|v| **v != 0.0).is_some_and(|v| *v < 0.0)
        };
        if flip {
            self.neg()
        } else {
            self
        }
    }

    /// Normalize and canonicalize. Fails on (near-)zero input.
    pub fn normalized(self) -> Result<Quat> {
        let n = self.norm();
        if !n.is_finite() || n < 1e-12 {
            return Err(Error::DegenerateQuaternion(n));
        }
        Ok(Quat([self.0[0] / n, self.0[1] / n, self.0[2] / n, self.0[3] / n]).canonical())
    }

    pub fn is_unit(&self, tol: f64) -> bool {
        (self.norm() - 1.0).abs() <= tol
    }

    /// Spherical interpolation along the short arc.
    pub fn slerp(&self, to: &Quat, t: f64) -> Quat {
        let mut target = *to;
        let mut d = self.dot(&target);
        if d < 0.0 {
            target = target.neg();
            d = -d;
        }
        if d > 1.0 - 1e-12 {
            let q = Quat(std::array::from_fn(|i| self.0[i] + t * (target.0[i] - self.0[i])));
            return q.normalized().unwrap_or(*self);
        }
        let theta = d.min(1.0).acos();
        let s = theta.sin();
        let a = ((1.0 - t) * theta).sin() / s;
        let b = (t * theta).sin() / s;
        Quat(std::array::from_fn(|i| a * self.0[i] + b * target.0[i]))
            .normalized()
            .unwrap_or(*self)
    }

    /// Rotate a vector by this quaternion.
    pub fn rotate(&self, v: Vec3) -> Vec3 {
        let p = Quat([0.0, v[0], v[1], v[2]]);
        let conj = Quat([self.0[0], -self.0[1], -self.0[2], -self.0[3]]);
        let r = self.mul(p).mul(conj);
        [r.0[1], r.0[2], r.0[3]]
    }
}

/// Geodesic rotation angle between two orientations, in `[0, pi]`.
///
/// Invariant under the sign of either argument.
pub fn quat_distance(q1: &Quat, q2: &Quat) -> Result<f64> {
    for q in [q1, q2] {
        if !q.is_unit(UNIT_TOLERANCE) {
            return Err(Error::InvalidArgument(format!(
                "quaternion {:?} is not unit-norm (norm {})",
                q.0,
                q.norm()
            )));
        }
    }
    Ok(geodesic_angle(q1, q2))
}

/// [`quat_distance`] without the unit-norm check, for hot loops over
/// already-validated data.
///
/// Evaluated as `4 atan2(|q1 - s q2|, |q1 + s q2|)` with `s = sign<q1, q2>`,
/// which equals `2 acos |<q1, q2>|` for unit inputs but stays accurate near 0.
#[inline]
pub fn geodesic_angle(q1: &Quat, q2: &Quat) -> f64 {
    let s = if q1.dot(q2) < 0.0 { -1.0 } else { 1.0 };
    let (mut minus, mut plus) = (0.0, 0.0);
    for i in 0..4 {
        let b = s * q2.0[i];
        minus += (q1.0[i] - b) * (q1.0[i] - b);
        plus += (q1.0[i] + b) * (q1.0[i] + b);
    }
    4.0 * minus.sqrt().atan2(plus.sqrt())
}

/// Which coordinate frame positions are expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FrameTag {
    #[serde(rename = "robot")]
    RobotCentric,
    #[serde(rename = "object")]
    ObjectCentric,
}

impl FrameTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            FrameTag::RobotCentric => "robot",
            FrameTag::ObjectCentric => "object",
        }
    }
}

impl std::str::FromStr for FrameTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "robot" => Ok(FrameTag::RobotCentric),
            "object" => Ok(FrameTag::ObjectCentric),
            other => Err(Error::Usage(format!("unknown frame `{other}` (expected robot|object)"))),
        }
    }
}

impl std::fmt::Display for FrameTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// 8-D end-effector pose: tip position, orientation, chopstick opening.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vec3,
    pub orientation: Quat,
    pub opening: f64,
}

impl Pose {
    /// Validating constructor: normalizes the quaternion and rejects
    /// non-finite values or an opening outside `[0, OPENING_MAX]`.
    pub fn new(position: Vec3, orientation: Quat, opening: f64) -> Result<Pose> {
        if position.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite position {position:?}")));
        }
        if !(0.0..=OPENING_MAX).contains(&opening) {
            return Err(Error::Validation(format!(
                "opening {opening} outside [0, {OPENING_MAX}]"
            )));
        }
        Ok(Pose {
            position,
            orientation: orientation.normalized()?,
            opening,
        })
    }

    /// Like [`Pose::new`] but clamps the opening and falls back to identity
    /// orientation for a degenerate quaternion.
    pub fn sanitized(position: Vec3, orientation: Quat, opening: f64) -> Pose {
        Pose {
            position,
            orientation: orientation.normalized().unwrap_or(Quat::IDENTITY),
            opening: opening.clamp(0.0, OPENING_MAX),
        }
    }

    pub fn to_array(&self) -> [f64; 8] {
        let p = self.position;
        let q = self.orientation.0;
        [p[0], p[1], p[2], q[0], q[1], q[2], q[3], self.opening]
    }

    /// Build from a flattened 8-vector, renormalizing the quaternion slice.
    pub fn from_slice(v: &[f64]) -> Result<Pose> {
        if v.len() != 8 {
            return Err(Error::InvalidArgument(format!("pose needs 8 values, got {}", v.len())));
        }
        Pose::new([v[0], v[1], v[2]], Quat([v[3], v[4], v[5], v[6]]), v[7])
    }

    pub fn translated(&self, delta: Vec3) -> Pose {
        Pose {
            position: add3(self.position, delta),
            ..*self
        }
    }
}

/// Re-express a robot-centric state with the object at the origin.
pub fn to_object_frame(state: &State) -> Result<State> {
    if state.frame != FrameTag::RobotCentric {
        return Err(Error::InvalidState("state is already object-centric".into()));
    }
    let obj = state.object_position;
    if obj.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite object position {obj:?}")));
    }
    Ok(State {
        pose: state.pose.translated(scale3(obj, -1.0)),
        object_position: [0.0; 3],
        frame: FrameTag::ObjectCentric,
    })
}

/// Inverse of [`to_object_frame`] for states; needs the world object position.
pub fn state_from_object_frame(state: &State, obj: Vec3) -> Result<State> {
    if state.frame != FrameTag::ObjectCentric {
        return Err(Error::InvalidState("state is already robot-centric".into()));
    }
    Ok(State {
        pose: state.pose.translated(obj),
        object_position: add3(state.object_position, obj),
        frame: FrameTag::RobotCentric,
    })
}

/// Express a robot-centric action relative to the object at `obj`.
pub fn action_to_object_frame(action: &Action, obj: Vec3) -> Result<Action> {
    if action.frame != FrameTag::RobotCentric {
        return Err(Error::InvalidState("action is already object-centric".into()));
    }
    Ok(Action {
        target: action.target.translated(scale3(obj, -1.0)),
        frame: FrameTag::ObjectCentric,
    })
}

/// Map an object-centric action back to the robot frame for execution.
pub fn from_object_frame(action: &Action, obj: Vec3) -> Result<Action> {
    if action.frame != FrameTag::ObjectCentric {
        return Err(Error::InvalidState("action is already robot-centric".into()));
    }
    Ok(Action {
        target: action.target.translated(obj),
        frame: FrameTag::RobotCentric,
    })
}
