//! Connected components and per-particle measurements.

use std::fmt::Write as _;

use crate::raster::{BinaryMask, LabelMap};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Connectivity {
    #[serde(rename = "4")]
    Four,
    #[default]
    #[serde(rename = "8")]
    Eight,
}

/// Measurements of one connected component.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleRecord {
    pub id: u32,
    pub area: usize,
    /// Mean of member pixel centers, `(x, y)`.
    pub centroid: (f64, f64),
    /// `2 * sqrt(area / pi)`.
    pub equivalent_diameter: f64,
    /// Inclusive `(x0, y0, x1, y1)`.
    pub bbox: (usize, usize, usize, usize),
}

struct DisjointSet {
    parent: Vec<u32>,
}

impl DisjointSet {
    fn new() -> Self {
        // slot 0 is unused so provisional labels start at 1
        Self { parent: vec![0] }
    }

    fn make(&mut self) -> u32 {
        let id = self.parent.len() as u32;
        self.parent.push(id);
        id
    }

    fn find(&mut self, mut a: u32) -> u32 {
        while self.parent[a as usize] != a {
            let grand = self.parent[self.parent[a as usize] as usize];
            self.parent[a as usize] = grand;
            a = grand;
        }
        a
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi as usize] = lo;
        }
    }
}

/// Labels maximal connected particle regions `1..=K` in the order their
/// first pixel appears in a row-major scan.
pub fn connected_components(mask: &BinaryMask, connectivity: Connectivity) -> LabelMap {
    let (w, h) = mask.dims();
    let mut provisional = vec![0u32; w * h];
    let mut sets = DisjointSet::new();

    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let mut neighbors = [0u32; 4];
            let mut n = 0;
            let mut push = |l: u32| {
                if l != 0 {
                    neighbors[n] = l;
                    n += 1;
                }
            };
            if x > 0 {
                push(provisional[y * w + x - 1]);
            }
            if y > 0 {
                push(provisional[(y - 1) * w + x]);
                if connectivity == Connectivity::Eight {
                    if x > 0 {
                        push(provisional[(y - 1) * w + x - 1]);
                    }
                    if x + 1 < w {
                        push(provisional[(y - 1) * w + x + 1]);
                    }
                }
            }
            let label = if n == 0 {
                sets.make()
            } else {
                let first = neighbors[0];
                for &other in &neighbors[1..n] {
                    sets.union(first, other);
                }
                first
            };
            provisional[y * w + x] = label;
        }
    }

    let mut remap = vec![0u32; sets.parent.len()];
    let mut next = 0u32;
    for l in provisional.iter_mut() {
        if *l == 0 {
            continue;
        }
        let root = sets.find(*l) as usize;
        if remap[root] == 0 {
            next += 1;
            remap[root] = next;
        }
        *l = remap[root];
    }
    LabelMap::from_parts_unchecked(w, h, provisional, next)
}

/// One record per label, ordered by id.
pub fn measure(labels: &LabelMap) -> Vec<ParticleRecord> {
    let k = labels.count() as usize;
    let mut area = vec![0usize; k];
    let mut sx = vec![0.0f64; k];
    let mut sy = vec![0.0f64; k];
    let mut bbox = vec![(usize::MAX, usize::MAX, 0usize, 0usize); k];
    for y in 0..labels.height() {
        for x in 0..labels.width() {
            let l = labels.get(x, y);
            if l == 0 {
                continue;
            }
            let i = l as usize - 1;
            area[i] += 1;
            sx[i] += x as f64;
            sy[i] += y as f64;
            let b = &mut bbox[i];
            *b = (b.0.min(x), b.1.min(y), b.2.max(x), b.3.max(y));
        }
    }
    (0..k)
        .map(|i| ParticleRecord {
            id: i as u32 + 1,
            area: area[i],
            centroid: (sx[i] / area[i] as f64, sy[i] / area[i] as f64),
            equivalent_diameter: 2.0 * (area[i] as f64 / std::f64::consts::PI).sqrt(),
            bbox: bbox[i],
        })
        .collect()
}

/// Removes components smaller than `min_area` pixels.
pub fn remove_small(mask: &BinaryMask, min_area: usize, connectivity: Connectivity) -> BinaryMask {
    if min_area <= 1 {
        return mask.clone();
    }
    let labels = connected_components(mask, connectivity);
    let mut area = vec![0usize; labels.count() as usize + 1];
    for &l in labels.data() {
        area[l as usize] += 1;
    }
    let data = labels
        .data()
        .iter()
        .map(|&l| l != 0 && area[l as usize] >= min_area)
        .collect();
    BinaryMask::from_vec(mask.width(), mask.height(), data).expect("same dimensions")
}

pub fn particles_csv(records: &[ParticleRecord]) -> String {
    let mut out = String::from("id,area_px,centroid_x,centroid_y,eq_diameter_px,bbox_x0,bbox_y0,bbox_x1,bbox_y1\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{:?},{:?},{:?},{},{},{},{}",
            r.id, r.area, r.centroid.0, r.centroid.1, r.equivalent_diameter, r.bbox.0, r.bbox.1, r.bbox.2, r.bbox.3
        );
    }
    out
}

/// Counts of equivalent diameters in bins `[k * width, (k + 1) * width)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SizeHistogram {
    pub bin_width: f64,
    /// Index `k` of the first bin.
    pub first_bin: i64,
    pub counts: Vec<usize>,
}

impl SizeHistogram {
    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn bins(&self) -> impl Iterator<Item = (f64, f64, usize)> + '_ {
        self.counts.iter().enumerate().map(|(i, &c)| {
            let k = self.first_bin + i as i64;
            (k as f64 * self.bin_width, (k + 1) as f64 * self.bin_width, c)
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_start,bin_end,count\n");
        for (a, b, c) in self.bins() {
            let _ = writeln!(out, "{a:?},{b:?},{c}");
        }
        out
    }
}

pub fn size_distribution(records: &[ParticleRecord], bin_width: f64) -> Result<SizeHistogram, String> {
    if !(bin_width > 0.0) {
        return Err(format!("bin width must be > 0, got {bin_width}"));
    }
    let bin_of = |d: f64| (d / bin_width).floor() as i64;
    let Some(lo) = records.iter().map(|r| bin_of(r.equivalent_diameter)).min() else {
        return Ok(SizeHistogram {
            bin_width,
            first_bin: 0,
            counts: Vec::new(),
        });
    };
    let hi = records.iter().map(|r| bin_of(r.equivalent_diameter)).max().unwrap();
    let mut counts = vec![0usize; (hi - lo + 1) as usize];
    for r in records {
        counts[(bin_of(r.equivalent_diameter) - lo) as usize] += 1;
    }
    Ok(SizeHistogram {
        bin_width,
        first_bin: lo,
        counts,
    })
}
