//! The 21-keypoint hand skeleton.
//!
//! Keypoint 0 is the wrist; each finger contributes four consecutive indices
//! ordered from the knuckle outwards: thumb 1–4, index 5–8, middle 9–12,
//! ring 13–16, little 17–20.

use serde::{Deserialize, Serialize};

pub const KEYPOINT_COUNT: usize = 21;
pub const WRIST: usize = 0;
pub const FINGER_COUNT: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoneClass {
    Metacarpal,
    Proximal,
    Other,
}

/// Joint type used to break down evaluation metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointClass {
    Wrist,
    Mcp,
    Pip,
    Dip,
    Tip,
}

impl JointClass {
    pub const ALL: [JointClass; 5] = [JointClass::Wrist, JointClass::Mcp, JointClass::Pip, JointClass::Dip, JointClass::Tip];

    pub fn name(self) -> &'static str {
        match self {
            JointClass::Wrist => "wrist",
            JointClass::Mcp => "mcp",
            JointClass::Pip => "pip",
            JointClass::Dip => "dip",
            JointClass::Tip => "tip",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bone {
    pub parent: usize,
    pub child: usize,
    pub class: BoneClass,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HandSkeleton {
    fingers: [[usize; 4]; FINGER_COUNT],
    bones: Vec<Bone>,
}

impl Default for HandSkeleton {
    fn default() -> Self {
        Self::hand()
    }
}

impl HandSkeleton {
    pub fn hand() -> Self {
        let mut fingers = [[0; 4]; FINGER_COUNT];
        let mut bones = Vec::with_capacity(20);
        for (f, finger) in fingers.iter_mut().enumerate() {
            let base = 1 + 4 * f;
            *finger = [base, base + 1, base + 2, base + 3];
            let mut parent = WRIST;
            for (j, &child) in finger.iter().enumerate() {
                let class = match j {
                    0 => BoneClass::Metacarpal,
                    1 => BoneClass::Proximal,
                    _ => BoneClass::Other,
                };
                bones.push(Bone { parent, child, class });
                parent = child;
            }
        }
        Self { fingers, bones }
    }

    pub fn keypoint_count(&self) -> usize {
        KEYPOINT_COUNT
    }

    pub fn wrist(&self) -> usize {
        WRIST
    }

    /// The four keypoint indices of each finger, knuckle first.
    pub fn fingers(&self) -> &[[usize; 4]; FINGER_COUNT] {
        &self.fingers
    }

    pub fn bones(&self) -> &[Bone] {
        &self.bones
    }

    /// Finger index containing `keypoint`, or `None` for the wrist.
    pub fn finger_of(&self, keypoint: usize) -> Option<usize> {
        self.fingers.iter().position(|f| f.contains(&keypoint))
    }

    pub fn joint_class(&self, keypoint: usize) -> JointClass {
        match self.fingers.iter().find_map(|f| f.iter().position(|&k| k == keypoint)) {
            None => JointClass::Wrist,
            Some(0) => JointClass::Mcp,
            Some(1) => JointClass::Pip,
            Some(2) => JointClass::Dip,
            Some(_) => JointClass::Tip,
        }
    }
}
