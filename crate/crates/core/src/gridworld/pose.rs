use serde::{Deserialize, Serialize};

/// Heading in 90 degree steps: 0 = East, 1 = North, 2 = West, 3 = South.
pub type Heading = u8;

/// Unit step along each heading, world frame (x east, y north).
pub const HEADING_DELTA: [(i64, i64); 4] = [(1, 0), (0, 1), (-1, 0), (0, -1)];

/// Discrete agent pose on the grid. One cell is 40 cm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pose {
    pub x: usize,
    pub y: usize,
    pub d: Heading,
}

impl Pose {
    pub fn new(x: usize, y: usize, d: Heading) -> Self {
        debug_assert!(d < 4);
        Pose { x, y, d }
    }

    pub fn cell(&self) -> (usize, usize) {
        (self.x, self.y)
    }

    pub fn rotate_left(self) -> Self {
        Pose { d: (self.d + 1) % 4, ..self }
    }

    pub fn rotate_right(self) -> Self {
        Pose { d: (self.d + 3) % 4, ..self }
    }

    /// Cell one step ahead, or `None` if it would leave the non-negative quadrant.
    pub fn ahead(&self) -> Option<(usize, usize)> {
        let (dx, dy) = HEADING_DELTA[self.d as usize];
        let nx = self.x as i64 + dx;
        let ny = self.y as i64 + dy;
        if nx < 0 || ny < 0 {
            None
        } else {
            Some((nx as usize, ny as usize))
        }
    }
}

// Poses go over the wire as [x, y, d].
impl Serialize for Pose {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        [self.x as u64, self.y as u64, self.d as u64].serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let [x, y, h] = <[u64; 3]>::deserialize(d)?;
        if h > 3 {
            return Err(serde::de::Error::custom(format!("heading {h} out of range 0..4")));
        }
        Ok(Pose::new(x as usize, y as usize, h as u8))
    }
}

/// The four discrete actions. Integer codes are fixed for serialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Stay = 0,
    RotateLeft = 1,
    RotateRight = 2,
    Forward = 3,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Stay, Action::RotateLeft, Action::RotateRight, Action::Forward];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Action> {
        Action::ALL.get(code).copied()
    }

    pub fn one_hot(self) -> [f64; 4] {
        let mut v = [0.0; 4];
        v[self.code()] = 1.0;
        v
    }

    /// Noiseless kinematics, ignoring obstacles.
    pub fn apply_kinematic(self, pose: Pose) -> Option<Pose> {
        match self {
            Action::Stay => Some(pose),
            Action::RotateLeft => Some(pose.rotate_left()),
            Action::RotateRight => Some(pose.rotate_right()),
            Action::Forward => pose.ahead().map(|(x, y)| Pose { x, y, d: pose.d }),
        }
    }
}

impl Serialize for Action {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(*self as u8)
    }
}

impl<'de> Deserialize<'de> for Action {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let code = u8::deserialize(d)?;
        Action::from_code(code as usize)
            .ok_or_else(|| serde::de::Error::custom(format!("action code {code} out of range 0..4")))
    }
}
