use super::LabelMapping;

/// Three-category labels used by hair compositing and the toy segmenter.
pub mod task {
    pub const BACKGROUND: u8 = 0;
    /// Face, body and everything else that is neither hair nor background.
    pub const OTHER: u8 = 1;
    pub const HAIR: u8 = 2;
    pub const NUM_CLASSES: usize = 3;
    pub const NAMES: [&str; NUM_CLASSES] = ["background", "face", "hair"];
}

/// Class order of the 19-category CelebAMask-HQ face parsing labels.
pub const CELEBAMASK_CLASSES: [&str; 19] = [
    "background",
    "skin",
    "nose",
    "eye_g",
    "l_eye",
    "r_eye",
    "l_brow",
    "r_brow",
    "l_ear",
    "r_ear",
    "mouth",
    "u_lip",
    "l_lip",
    "hair",
    "hat",
    "ear_r",
    "neck_l",
    "neck",
    "cloth",
];

/// Maps CelebAMask-HQ labels onto {background, other, hair}.
pub fn celebamask_to_hair_task() -> LabelMapping {
    let map = (0..CELEBAMASK_CLASSES.len() as u8)
        .map(|c| {
            let t = match c {
                0 => task::BACKGROUND,
                13 => task::HAIR,
                _ => task::OTHER,
            };
            (c, t)
        })
        .collect();
    LabelMapping {
        map,
        num_classes: task::NUM_CLASSES,
    }
}
