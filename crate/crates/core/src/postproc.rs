//! Connected-component filtering of binary segmentations.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Volume;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    Six,
    Eighteen,
    #[default]
    TwentySix,
}

impl Connectivity {
    pub fn neighbours(self) -> usize {
        match self {
            Connectivity::Six => 6,
            Connectivity::Eighteen => 18,
            Connectivity::TwentySix => 26,
        }
    }

    /// Largest number of nonzero components in an admissible offset.
    fn max_order(self) -> i32 {
        match self {
            Connectivity::Six => 1,
            Connectivity::Eighteen => 2,
            Connectivity::TwentySix => 3,
        }
    }

    /// Neighbour offsets `(dx, dy, dz)` under this connectivity.
    pub fn offsets(self) -> Vec<[i64; 3]> {
        let mut out = Vec::with_capacity(self.neighbours());
        for dz in -1..=1i64 {
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    let order = (dx != 0) as i32 + (dy != 0) as i32 + (dz != 0) as i32;
                    if order > 0 && order <= self.max_order() {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

impl TryFrom<u32> for Connectivity {
    type Error = Error;

    fn try_from(n: u32) -> Result<Self> {
        match n {
            6 => Ok(Connectivity::Six),
            18 => Ok(Connectivity::Eighteen),
            26 => Ok(Connectivity::TwentySix),
            other => Err(Error::InvalidArgument(format!(
                "connectivity must be 6, 18 or 26, got {other}"
            ))),
        }
    }
}

impl FromStr for Connectivity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let n: u32 = s.trim().parse().map_err(|_| {
            Error::InvalidArgument(format!("connectivity must be 6, 18 or 26, got {s:?}"))
        })?;
        Connectivity::try_from(n)
    }
}

/// Component labels of a mask: 0 is background, components are numbered
/// 1..=K in the order their first voxel appears in x-fastest scan order.
#[derive(Clone, Debug, PartialEq)]
pub struct ComponentSet {
    dims: [usize; 3],
    spacing: [f32; 3],
    labels: Vec<u32>,
    sizes: Vec<(u32, usize)>,
}

impl ComponentSet {
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// `(label, voxel count)` sorted by size descending, smaller label first on ties.
    pub fn sizes(&self) -> &[(u32, usize)] {
        &self.sizes
    }

    pub fn count(&self) -> usize {
        self.sizes.len()
    }

    pub fn size_of(&self, label: u32) -> Option<usize> {
        self.sizes
            .iter()
            .find(|(l, _)| *l == label)
            .map(|&(_, n)| n)
    }

    fn available(&self) -> String {
        let mut s = String::new();
        for (i, (l, n)) in self.sizes.iter().enumerate() {
            if i > 0 {
                s.push_str(", ");
            }
            let _ = write!(s, "{l} ({n} voxels)");
        }
        if s.is_empty() {
            s.push_str("none");
        }
        s
    }
}

fn find(parent: &mut [u32], mut i: u32) -> u32 {
    while parent[i as usize] != i {
        let p = parent[i as usize];
        parent[i as usize] = parent[p as usize];
        i = p;
    }
    i
}

fn union(parent: &mut [u32], a: u32, b: u32) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi as usize] = lo;
    }
}

pub fn label_components(mask: &Volume, connectivity: Connectivity) -> Result<ComponentSet> {
    let voxels = mask.require_mask("component labeling input")?;
    let [dx, dy, dz] = mask.dims();
    let back: Vec<[i64; 3]> = connectivity
        .offsets()
        .into_iter()
        .filter(|&[x, y, z]| z < 0 || (z == 0 && (y < 0 || (y == 0 && x < 0))))
        .collect();

    // Provisional labels are scan-ordered, so the smallest label in a set is
    // its first-encountered voxel.
    let mut provisional = vec![0u32; voxels.len()];
    let mut parent: Vec<u32> = vec![0];
    for z in 0..dz {
        for y in 0..dy {
            for x in 0..dx {
                let i = x + dx * (y + dy * z);
                if voxels[i] == 0 {
                    continue;
                }
                let mut label = 0u32;
                for &[ox, oy, oz] in &back {
                    let (nx, ny, nz) = (x as i64 + ox, y as i64 + oy, z as i64 + oz);
                    if nx < 0 || ny < 0 || nz < 0 || nx >= dx as i64 || ny >= dy as i64 {
                        continue;
                    }
                    let j = nx as usize + dx * (ny as usize + dy * nz as usize);
                    let l = provisional[j];
                    if l == 0 {
                        continue;
                    }
                    if label == 0 {
                        label = l;
                    } else {
                        union(&mut parent, label, l);
                    }
                }
                if label == 0 {
                    label = parent.len() as u32;
                    parent.push(label);
                }
                provisional[i] = label;
            }
        }
    }

    let mut final_of = vec![0u32; parent.len()];
    let mut counts: Vec<usize> = vec![0];
    for l in provisional.iter_mut().filter(|l| **l != 0) {
        let root = find(&mut parent, *l) as usize;
        if final_of[root] == 0 {
            final_of[root] = counts.len() as u32;
            counts.push(0);
        }
        *l = final_of[root];
        counts[*l as usize] += 1;
    }
    let mut sizes: Vec<(u32, usize)> = counts
        .iter()
        .enumerate()
        .skip(1)
        .map(|(l, &n)| (l as u32, n))
        .collect();
    sizes.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ComponentSet {
        dims: mask.dims(),
        spacing: mask.spacing(),
        labels: provisional,
        sizes,
    })
}

/// Mask of the `k` largest components, or of exactly `keep_labels` when given.
pub fn keep_largest(
    components: &ComponentSet,
    k: usize,
    keep_labels: Option<&[u32]>,
) -> Result<Volume> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let selected: Vec<u32> = match keep_labels {
        Some(labels) => {
            for &l in labels {
                if components.size_of(l).is_none() {
                    return Err(Error::UnknownLabel {
                        label: l,
                        available: components.available(),
                    });
                }
            }
            labels.to_vec()
        }
        None => components.sizes.iter().take(k).map(|&(l, _)| l).collect(),
    };
    let mut keep = vec![false; components.sizes.len() + 1];
    for l in selected {
        keep[l as usize] = true;
    }
    let voxels = components
        .labels
        .iter()
        .map(|&l| u8::from(l != 0 && keep[l as usize]))
        .collect();
    Volume::mask(components.dims, components.spacing, voxels)
}

/// Foreground where the probability is at least `threshold`.
pub fn binarize(prob: &Volume, threshold: f32) -> Result<Volume> {
    let p = prob.require_gray("probability map")?;
    Volume::mask(
        prob.dims(),
        prob.spacing(),
        p.iter().map(|&v| u8::from(v >= threshold)).collect(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PostprocConfig {
    pub keep: usize,
    pub connectivity: Connectivity,
    pub threshold: f32,
    pub select_labels: Option<Vec<u32>>,
}

impl Default for PostprocConfig {
    fn default() -> Self {
        Self {
            keep: 2,
            connectivity: Connectivity::TwentySix,
            threshold: 0.5,
            select_labels: None,
        }
    }
}

/// Labels `mask` and keeps the configured components.
pub fn postprocess(mask: &Volume, config: &PostprocConfig) -> Result<Volume> {
    let set = label_components(mask, config.connectivity)?;
    keep_largest(&set, config.keep, config.select_labels.as_deref())
}
