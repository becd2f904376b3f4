use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeFamily {
    Disk,
    Ring,
    Square,
    Frame,
    Triangle,
    Cross,
    BarH,
    BarV,
    Diamond,
    LShape,
    TShape,
    CheckerBlob,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 12] = [
        ShapeFamily::Disk,
        ShapeFamily::Ring,
        ShapeFamily::Square,
        ShapeFamily::Frame,
        ShapeFamily::Triangle,
        ShapeFamily::Cross,
        ShapeFamily::BarH,
        ShapeFamily::BarV,
        ShapeFamily::Diamond,
        ShapeFamily::LShape,
        ShapeFamily::TShape,
        ShapeFamily::CheckerBlob,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeFamily::Disk => "disk",
            ShapeFamily::Ring => "ring",
            ShapeFamily::Square => "square",
            ShapeFamily::Frame => "frame",
            ShapeFamily::Triangle => "triangle",
            ShapeFamily::Cross => "cross",
            ShapeFamily::BarH => "bar-h",
            ShapeFamily::BarV => "bar-v",
            ShapeFamily::Diamond => "diamond",
            ShapeFamily::LShape => "l-shape",
            ShapeFamily::TShape => "t-shape",
            ShapeFamily::CheckerBlob => "checker-blob",
        }
    }

    /// Whether the family is drawn with a random rotation. Bars stay axis
    /// aligned since their orientation is what tells them apart.
    pub fn rotates(self) -> bool {
        matches!(
            self,
            ShapeFamily::Triangle
                | ShapeFamily::LShape
                | ShapeFamily::TShape
                | ShapeFamily::CheckerBlob
        )
    }

    /// Membership test in the unit frame `u, v ∈ [-1, 1]`.
    pub fn contains(self, u: f32, v: f32) -> bool {
        let (au, av) = (u.abs(), v.abs());
        match self {
            ShapeFamily::Disk | ShapeFamily::CheckerBlob => u * u + v * v <= 1.0,
            ShapeFamily::Ring => {
                let r2 = u * u + v * v;
                (0.5 * 0.5..=1.0).contains(&r2)
            }
            ShapeFamily::Square => au <= 0.8 && av <= 0.8,
            ShapeFamily::Frame => {
                let m = au.max(av);
                (0.45..=0.9).contains(&m)
            }
            ShapeFamily::Triangle => (-0.9..=0.8).contains(&v) && au <= (v + 0.9) / 1.7 * 0.95,
            ShapeFamily::Cross => (au <= 0.32 && av <= 0.95) || (av <= 0.32 && au <= 0.95),
            ShapeFamily::BarH => au <= 1.0 && av <= 0.38,
            ShapeFamily::BarV => au <= 0.38 && av <= 1.0,
            ShapeFamily::Diamond => au + av <= 1.0,
            ShapeFamily::LShape => {
                ((-0.85..=-0.3).contains(&u) && av <= 0.9)
                    || ((0.35..=0.9).contains(&v) && (-0.85..=0.85).contains(&u))
            }
            ShapeFamily::TShape => {
                ((-0.9..=-0.4).contains(&v) && au <= 0.9) || (au <= 0.27 && av <= 0.9)
            }
        }
    }
}

impl fmt::Display for ShapeFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown shape family {s:?}")))
    }
}

/// Closed interval `[lo, hi]` of a jittered appearance parameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f32,
    pub hi: f32,
}

impl Range {
    pub const fn new(lo: f32, hi: f32) -> Self {
        Self { lo, hi }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Appearance {
    /// Hue in turns; values wrap.
    pub hue: Range,
    pub saturation: Range,
    pub value: Range,
    /// Multiplier on the nominal radius.
    pub scale: Range,
    /// Nominal radius as a fraction of `min(H, W)`.
    pub radius: f32,
    /// Maximum absolute rotation in radians, used for rotating families.
    pub rotation: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: u32,
    pub family: ShapeFamily,
    pub appearance: Appearance,
}

/// Ordered class list; ids are unique and contiguous from 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCatalog {
    entries: Vec<ClassEntry>,
}

impl ClassCatalog {
    pub fn new(entries: Vec<ClassEntry>) -> Result<Self> {
        for (i, e) in entries.iter().enumerate() {
            if e.id as usize != i + 1 {
                return Err(Error::InvalidConfig(format!(
                    "class ids must be contiguous from 1; entry {i} has id {}",
                    e.id
                )));
            }
        }
        if entries.len() > 254 {
            return Err(Error::InvalidConfig("at most 254 classes".into()));
        }
        Ok(Self { entries })
    }

    /// The twelve shape families. Hues repeat every four classes, so color
    /// alone never identifies a class.
    pub fn default_shapes() -> Self {
        Self::with_families(&ShapeFamily::ALL)
    }

    pub fn with_families(families: &[ShapeFamily]) -> Self {
        let entries = families
            .iter()
            .enumerate()
            .map(|(i, &family)| {
                let hue = (i % 4) as f32 / 4.0 + 0.04;
                ClassEntry {
                    id: i as u32 + 1,
                    family,
                    appearance: Appearance {
                        hue: Range::new(hue - 0.05, hue + 0.05),
                        saturation: Range::new(0.55, 0.9),
                        value: Range::new(0.6, 0.95),
                        scale: Range::new(0.6, 1.4),
                        radius: 0.2,
                        rotation: if family.rotates() { 0.35 } else { 0.0 },
                    },
                }
            })
            .collect();
        Self { entries }
    }

    pub fn entries(&self) -> &[ClassEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<u32> {
        self.entries.iter().map(|e| e.id).collect()
    }

    pub fn get(&self, id: u32) -> Option<&ClassEntry> {
        self.entries.get((id as usize).checked_sub(1)?)
    }
}

/// Even fold partition: the classes of `test_fold` are novel, all others base.
pub fn split_folds(
    catalog: &ClassCatalog,
    fold_count: usize,
    test_fold: usize,
) -> Result<(Vec<u32>, Vec<u32>)> {
    let n = catalog.len();
    if fold_count == 0 || n == 0 || n % fold_count != 0 {
        return Err(Error::IndivisibleCatalog {
            classes: n,
            folds: fold_count,
        });
    }
    if test_fold >= fold_count {
        return Err(Error::InvalidConfig(format!(
            "test fold {test_fold} out of range for {fold_count} folds"
        )));
    }
    let per = n / fold_count;
    let lo = test_fold * per + 1;
    let hi = lo + per;
    let (novel, base) = catalog.ids().into_iter().partition(|id| (lo..hi).contains(&(*id as usize)));
    Ok((base, novel))
}
