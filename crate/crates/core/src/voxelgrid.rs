//! Fine and coarse sparse grids over contracted space.
//!
//! Cells are addressed by Morton keys. The key set of a grid lives in a shared
//! [`CellIndex`] so payload updates during fitting never touch the hash map.

use std::sync::Arc;

use rustc_hash::FxHashMap;

use crate::error::{Error, Result};
use crate::frustum::LiftedPoint;
use crate::geometry::{grid_coords, morton_decode, morton_encode, Contraction, Vec3};
use crate::tensor_io::{Archive, Tensor};

pub const DEFAULT_DENSITY_FLOOR: f64 = 1e-8;

/// Sorted Morton keys of the occupied cells at one level.
#[derive(Debug, Clone, PartialEq)]
pub struct CellIndex {
    level: u32,
    keys: Vec<u64>,
    map: FxHashMap<u64, u32>,
}

impl CellIndex {
    pub fn new(level: u32, mut keys: Vec<u64>) -> Result<CellIndex> {
        if level == 0 || level > 21 {
            return Err(Error::validation("level", "must lie in 1..=21"));
        }
        keys.sort_unstable();
        keys.dedup();
        let side = 1u32 << level;
        if let Some(k) = keys.iter().find(|&&k| morton_decode(k).iter().any(|&c| c >= side)) {
            return Err(Error::Format(format!("cell key {k} outside level {level}")));
        }
        let map = keys.iter().enumerate().map(|(i, &k)| (k, i as u32)).collect();
        Ok(CellIndex { level, keys, map })
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn keys(&self) -> &[u64] {
        &self.keys
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn find(&self, key: u64) -> Option<usize> {
        self.map.get(&key).map(|&i| i as usize)
    }

    pub fn key_of(&self, s: &Vec3) -> u64 {
        morton_encode(grid_coords(s, self.level))
    }

    /// Cell containing contracted point `s`, if occupied.
    pub fn locate(&self, s: &Vec3) -> Option<usize> {
        self.find(self.key_of(s))
    }

    /// For every cell, the index of each of its 27 neighbors (`u32::MAX` when
    /// absent). Offset `(dx, dy, dz)` sits at `(dx+1)*9 + (dy+1)*3 + (dz+1)`.
    pub fn neighbor_table(&self) -> Vec<[u32; 27]> {
        let side = 1i64 << self.level;
        self.keys
            .iter()
            .map(|&k| {
                let c = morton_decode(k);
                let mut row = [u32::MAX; 27];
                for (o, slot) in row.iter_mut().enumerate() {
                    let d = [(o / 9) as i64 - 1, (o / 3 % 3) as i64 - 1, (o % 3) as i64 - 1];
                    let n = [c[0] as i64 + d[0], c[1] as i64 + d[1], c[2] as i64 + d[2]];
                    if n.iter().all(|&v| v >= 0 && v < side) {
                        let key = morton_encode([n[0] as u32, n[1] as u32, n[2] as u32]);
                        if let Some(&i) = self.map.get(&key) {
                            *slot = i;
                        }
                    }
                }
                row
            })
            .collect()
    }
}

/// One level of cells with mean features and densities.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGrid {
    cells: Arc<CellIndex>,
    channels: usize,
    features: Vec<f64>,
    density: Vec<f64>,
    count: Vec<u32>,
}

impl SparseGrid {
    pub fn empty(level: u32, channels: usize) -> Result<SparseGrid> {
        SparseGrid::from_parts(Arc::new(CellIndex::new(level, Vec::new())?), channels, Vec::new(), Vec::new(), Vec::new())
    }

    pub fn from_parts(
        cells: Arc<CellIndex>,
        channels: usize,
        features: Vec<f64>,
        density: Vec<f64>,
        count: Vec<u32>,
    ) -> Result<SparseGrid> {
        let n = cells.len();
        if features.len() != n * channels || density.len() != n || count.len() != n {
            return Err(Error::Shape(format!(
                "grid payload does not match {n} cells of width {channels}"
            )));
        }
        if density.iter().any(|d| !(*d >= 0.0)) {
            return Err(Error::Domain("cell densities must be non-negative".into()));
        }
        if count.contains(&0) {
            return Err(Error::Domain("cell counts must be at least 1".into()));
        }
        Ok(SparseGrid {
            cells,
            channels,
            features,
            density,
            count,
        })
    }

    pub fn cells(&self) -> &Arc<CellIndex> {
        &self.cells
    }

    pub fn level(&self) -> u32 {
        self.cells.level
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.channels..(i + 1) * self.channels]
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    pub fn count(&self) -> &[u32] {
        &self.count
    }

    /// Replace the payload, keeping the cell set.
    pub fn with_payload(&self, channels: usize, features: Vec<f64>, density: Vec<f64>) -> Result<SparseGrid> {
        SparseGrid::from_parts(self.cells.clone(), channels, features, density, self.count.clone())
    }

    pub fn to_archive(&self, prefix: &str, ar: &mut Archive) -> Result<()> {
        let n = self.len();
        let key_bytes: Vec<u8> = self.cells.keys.iter().flat_map(|k| k.to_le_bytes()).collect();
        ar.insert(format!("{prefix}.level"), Tensor::from_f64(vec![1], vec![self.level() as f64])?);
        ar.insert(format!("{prefix}.keys"), Tensor::from_u8(vec![n.max(1), 8], pad(key_bytes, 8))?);
        ar.insert(
            format!("{prefix}.features"),
            Tensor::from_f64(vec![n.max(1), self.channels.max(1)], pad(self.features.clone(), self.channels.max(1)))?,
        );
        ar.insert(format!("{prefix}.density"), Tensor::from_f64(vec![n.max(1)], pad(self.density.clone(), 1))?);
        ar.insert(
            format!("{prefix}.count"),
            Tensor::from_f64(vec![n.max(1)], pad(self.count.iter().map(|&c| c as f64).collect(), 1))?,
        );
        ar.insert(format!("{prefix}.shape"), Tensor::from_f64(vec![2], vec![n as f64, self.channels as f64])?);
        Ok(())
    }

    pub fn from_archive(prefix: &str, ar: &Archive) -> Result<SparseGrid> {
        let level = ar.require(&format!("{prefix}.level"))?.to_f64_vec()[0] as u32;
        let shape = ar.require(&format!("{prefix}.shape"))?.to_f64_vec();
        let (n, channels) = (shape[0] as usize, shape[1] as usize);
        let key_bytes = ar
            .require(&format!("{prefix}.keys"))?
            .as_u8()
            .ok_or_else(|| Error::Format(format!("{prefix}.keys must be u8")))?
            .to_vec();
        let keys: Vec<u64> = key_bytes
            .chunks_exact(8)
            .take(n)
            .map(|b| u64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        let mut features = ar.require(&format!("{prefix}.features"))?.to_f64_vec();
        features.truncate(n * channels);
        let mut density = ar.require(&format!("{prefix}.density"))?.to_f64_vec();
        density.truncate(n);
        let mut count: Vec<u32> = ar
            .require(&format!("{prefix}.count"))?
            .to_f64_vec()
            .iter()
            .map(|&c| c as u32)
            .collect();
        count.truncate(n);
        if keys.len() != n || keys.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Format(format!("{prefix}.keys are not {n} sorted keys")));
        }
        SparseGrid::from_parts(Arc::new(CellIndex::new(level, keys)?), channels, features, density, count)
    }
}

// Tensors cannot be empty, so zero-cell grids store one padding row.
fn pad<T: Default + Clone>(mut v: Vec<T>, row: usize) -> Vec<T> {
    if v.is_empty() {
        v.resize(row, T::default());
    }
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualOctree {
    pub fine: SparseGrid,
    pub coarse: SparseGrid,
}

struct Accum {
    feature: Vec<f64>,
    density: f64,
    count: u32,
}

fn accumulate(
    keyed: impl Iterator<Item = (u64, usize)>,
    points: &[LiftedPoint],
    level: u32,
    channels: usize,
) -> Result<SparseGrid> {
    let mut acc: FxHashMap<u64, Accum> = FxHashMap::default();
    for (key, i) in keyed {
        let p = &points[i];
        let a = acc.entry(key).or_insert_with(|| Accum {
            feature: vec![0.0; channels],
            density: 0.0,
            count: 0,
        });
        for (s, f) in a.feature.iter_mut().zip(&p.feature) {
            *s += f;
        }
        a.density += p.density;
        a.count += 1;
    }
    let cells = Arc::new(CellIndex::new(level, acc.keys().copied().collect())?);
    let mut features = Vec::with_capacity(cells.len() * channels);
    let mut density = Vec::with_capacity(cells.len());
    let mut count = Vec::with_capacity(cells.len());
    for k in cells.keys() {
        let a = &acc[k];
        let n = a.count as f64;
        features.extend(a.feature.iter().map(|f| f / n));
        density.push(a.density / n);
        count.push(a.count);
    }
    SparseGrid::from_parts(cells, channels, features, density, count)
}

/// Average lifted points into fine and coarse cells, dropping points whose
/// density does not exceed `density_floor`.
pub fn build(
    points: &[LiftedPoint],
    contraction: &Contraction,
    fine_level: u32,
    coarse_level: u32,
    density_floor: f64,
) -> Result<DualOctree> {
    if fine_level <= coarse_level {
        return Err(Error::validation("fine_level", "must exceed coarse_level"));
    }
    let channels = points.first().map_or(0, |p| p.feature.len());
    if points.iter().any(|p| p.feature.len() != channels) {
        return Err(Error::Shape("lifted points have differing feature widths".into()));
    }
    let kept: Vec<(usize, [u32; 3])> = points
        .iter()
        .enumerate()
        .filter(|(_, p)| p.density > density_floor)
        .map(|(i, p)| (i, grid_coords(&contraction.contract(&p.position), fine_level)))
        .collect();
    let shift = fine_level - coarse_level;
    let fine = accumulate(kept.iter().map(|&(i, c)| (morton_encode(c), i)), points, fine_level, channels)?;
    let coarse = accumulate(
        kept.iter().map(|&(i, c)| (morton_encode([c[0] >> shift, c[1] >> shift, c[2] >> shift]), i)),
        points,
        coarse_level,
        channels,
    )?;
    Ok(DualOctree { fine, coarse })
}

/// Coarse key of a fine key `shift` levels down.
pub fn parent_key(key: u64, shift: u32) -> u64 {
    key >> (3 * shift)
}

/// Which fine cells pool into each output coarse cell, and where each output
/// cell's own coarse payload comes from.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolMap {
    pub out: Arc<CellIndex>,
    /// Source coarse cell per output cell.
    pub from_coarse: Vec<Option<u32>>,
    /// CSR offsets into `children`.
    pub offsets: Vec<u32>,
    pub children: Vec<u32>,
}

impl PoolMap {
    pub fn new(fine: &CellIndex, coarse: &CellIndex) -> Result<PoolMap> {
        let shift = fine.level() - coarse.level();
        let mut keys: Vec<u64> = coarse.keys().to_vec();
        keys.extend(fine.keys().iter().map(|&k| parent_key(k, shift)));
        let out = Arc::new(CellIndex::new(coarse.level(), keys)?);
        let from_coarse = out.keys().iter().map(|&k| coarse.find(k).map(|i| i as u32)).collect();
        let mut buckets: Vec<Vec<u32>> = vec![Vec::new(); out.len()];
        for (i, &k) in fine.keys().iter().enumerate() {
            let o = out.find(parent_key(k, shift)).expect("parent inserted above");
            buckets[o].push(i as u32);
        }
        let mut offsets = Vec::with_capacity(out.len() + 1);
        let mut children = Vec::with_capacity(fine.len());
        offsets.push(0);
        for b in buckets {
            children.extend(b);
            offsets.push(children.len() as u32);
        }
        Ok(PoolMap {
            out,
            from_coarse,
            offsets,
            children,
        })
    }

    pub fn children_of(&self, o: usize) -> &[u32] {
        &self.children[self.offsets[o] as usize..self.offsets[o + 1] as usize]
    }

    /// `[coarse || mean(fine children)]` per output cell, zero-filled.
    pub fn concat_features(&self, coarse: &[f64], cc: usize, fine: &[f64], cf: usize) -> Vec<f64> {
        let width = cc + cf;
        let mut out = vec![0.0; self.out.len() * width];
        for o in 0..self.out.len() {
            let row = &mut out[o * width..(o + 1) * width];
            if let Some(c) = self.from_coarse[o] {
                row[..cc].copy_from_slice(&coarse[c as usize * cc..(c as usize + 1) * cc]);
            }
            let kids = self.children_of(o);
            if !kids.is_empty() {
                let inv = 1.0 / kids.len() as f64;
                for &k in kids {
                    for (r, f) in row[cc..].iter_mut().zip(&fine[k as usize * cf..(k as usize + 1) * cf]) {
                        *r += f;
                    }
                }
                for r in &mut row[cc..] {
                    *r *= inv;
                }
            }
        }
        out
    }

    /// Reverse of [`PoolMap::concat_features`]; returns `(d coarse, d fine)`.
    pub fn concat_vjp(&self, grad: &[f64], cc: usize, cf: usize, n_coarse: usize, n_fine: usize) -> (Vec<f64>, Vec<f64>) {
        let width = cc + cf;
        let mut gc = vec![0.0; n_coarse * cc];
        let mut gf = vec![0.0; n_fine * cf];
        for o in 0..self.out.len() {
            let row = &grad[o * width..(o + 1) * width];
            if let Some(c) = self.from_coarse[o] {
                for (g, r) in gc[c as usize * cc..(c as usize + 1) * cc].iter_mut().zip(&row[..cc]) {
                    *g += r;
                }
            }
            let kids = self.children_of(o);
            if !kids.is_empty() {
                let inv = 1.0 / kids.len() as f64;
                for &k in kids {
                    for (g, r) in gf[k as usize * cf..(k as usize + 1) * cf].iter_mut().zip(&row[cc..]) {
                        *g += r * inv;
                    }
                }
            }
        }
        (gc, gf)
    }

    /// Coarse density where present, pooled fine mean for new cells.
    pub fn densities(&self, coarse: &[f64], fine: &[f64]) -> Vec<f64> {
        (0..self.out.len())
            .map(|o| match self.from_coarse[o] {
                Some(c) => coarse[c as usize],
                None => {
                    let kids = self.children_of(o);
                    kids.iter().map(|&k| fine[k as usize]).sum::<f64>() / kids.len() as f64
                }
            })
            .collect()
    }
}

/// Pool fine cells into the coarse level and concatenate them onto the
/// coarse features. The fine grid is returned unchanged.
pub fn downsample_concat(oct: &DualOctree) -> Result<DualOctree> {
    let map = PoolMap::new(&oct.fine.cells, &oct.coarse.cells)?;
    let (cc, cf) = (oct.coarse.channels, oct.fine.channels);
    let features = map.concat_features(&oct.coarse.features, cc, &oct.fine.features, cf);
    let density = map.densities(&oct.coarse.density, &oct.fine.density);
    let count = (0..map.out.len())
        .map(|o| match map.from_coarse[o] {
            Some(c) => oct.coarse.count[c as usize],
            None => map.children_of(o).len() as u32,
        })
        .collect();
    let coarse = SparseGrid::from_parts(map.out.clone(), cc + cf, features, density, count)?;
    Ok(DualOctree {
        fine: oct.fine.clone(),
        coarse,
    })
}

/// Kernel for a 3x3x3 sparse convolution, laid out `[27][c_in][c_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    pub c_in: usize,
    pub c_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvKernel {
    pub fn new(c_in: usize, c_out: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<ConvKernel> {
        if weights.len() != 27 * c_in * c_out || bias.len() != c_out {
            return Err(Error::Shape(format!(
                "kernel needs {} weights and {c_out} biases, got {} and {}",
                27 * c_in * c_out,
                weights.len(),
                bias.len()
            )));
        }
        Ok(ConvKernel {
            c_in,
            c_out,
            weights,
            bias,
        })
    }

    /// Center tap is the identity, everything else zero.
    pub fn identity(c: usize) -> ConvKernel {
        let mut weights = vec![0.0; 27 * c * c];
        for i in 0..c {
            weights[13 * c * c + i * c + i] = 1.0;
        }
        ConvKernel {
            c_in: c,
            c_out: c,
            weights,
            bias: vec![0.0; c],
        }
    }
}

/// Submanifold convolution on raw arrays, using a precomputed neighbor table.
pub fn conv_features(features: &[f64], neighbors: &[[u32; 27]], k: &ConvKernel) -> Vec<f64> {
    let (ci, co) = (k.c_in, k.c_out);
    let mut out = Vec::with_capacity(neighbors.len() * co);
    for nb in neighbors {
        let base = out.len();
        out.extend_from_slice(&k.bias);
        let row = &mut out[base..];
        for (o, &n) in nb.iter().enumerate() {
            if n == u32::MAX {
                continue;
            }
            let f = &features[n as usize * ci..(n as usize + 1) * ci];
            let w = &k.weights[o * ci * co..(o + 1) * ci * co];
            for (a, &fa) in f.iter().enumerate() {
                if fa == 0.0 {
                    continue;
                }
                for (r, wv) in row.iter_mut().zip(&w[a * co..(a + 1) * co]) {
                    *r += fa * wv;
                }
            }
        }
    }
    out
}

/// Reverse rule for [`conv_features`]: `(d features, d weights, d bias)`.
pub fn conv_vjp(
    features: &[f64],
    neighbors: &[[u32; 27]],
    k: &ConvKernel,
    grad: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (ci, co) = (k.c_in, k.c_out);
    let mut gf = vec![0.0; features.len()];
    let mut gw = vec![0.0; k.weights.len()];
    let mut gb = vec![0.0; co];
    for (cell, nb) in neighbors.iter().enumerate() {
        let g = &grad[cell * co..(cell + 1) * co];
        for (b, v) in gb.iter_mut().zip(g) {
            *b += v;
        }
        for (o, &n) in nb.iter().enumerate() {
            if n == u32::MAX {
                continue;
            }
            let n = n as usize;
            for a in 0..ci {
                let w = &k.weights[(o * ci + a) * co..(o * ci + a + 1) * co];
                let fa = features[n * ci + a];
                let gwa = &mut gw[(o * ci + a) * co..(o * ci + a + 1) * co];
                let mut acc = 0.0;
                for c in 0..co {
                    acc += w[c] * g[c];
                    gwa[c] += fa * g[c];
                }
                gf[n * ci + a] += acc;
            }
        }
    }
    (gf, gw, gb)
}

/// Submanifold 3x3x3 convolution: same cells out as in, densities untouched.
pub fn sparse_conv(grid: &SparseGrid, kernel: &ConvKernel) -> Result<SparseGrid> {
    if kernel.c_in != grid.channels {
        return Err(Error::Shape(format!(
            "kernel expects {} input channels, grid has {}",
            kernel.c_in, grid.channels
        )));
    }
    let features = conv_features(&grid.features, &grid.cells.neighbor_table(), kernel);
    grid.with_payload(kernel.c_out, features, grid.density.clone())
}

/// `(fine cell, coarse cell)` containing contracted point `s`.
pub fn locate(oct: &DualOctree, s: &Vec3) -> (Option<usize>, Option<usize>) {
    (oct.fine.cells.locate(s), oct.coarse.cells.locate(s))
}

/// Fine density if the fine cell exists, else coarse density, else zero.
pub fn query_density(oct: &DualOctree, s: &Vec3) -> f64 {
    match locate(oct, s) {
        (Some(f), _) => oct.fine.density[f],
        (None, Some(c)) => oct.coarse.density[c],
        (None, None) => 0.0,
    }
}

/// `[fine feature || coarse feature]`, zeros for missing cells.
pub fn query_feature(oct: &DualOctree, s: &Vec3) -> Vec<f64> {
    let (f, c) = locate(oct, s);
    let mut out = vec![0.0; oct.fine.channels + oct.coarse.channels];
    if let Some(f) = f {
        out[..oct.fine.channels].copy_from_slice(oct.fine.feature(f));
    }
    if let Some(c) = c {
        out[oct.fine.channels..].copy_from_slice(oct.coarse.feature(c));
    }
    out
}

impl DualOctree {
    pub fn empty(fine_level: u32, coarse_level: u32, fine_channels: usize, coarse_channels: usize) -> Result<DualOctree> {
        Ok(DualOctree {
            fine: SparseGrid::empty(fine_level, fine_channels)?,
            coarse: SparseGrid::empty(coarse_level, coarse_channels)?,
        })
    }

    pub fn feature_width(&self) -> usize {
        self.fine.channels + self.coarse.channels
    }

    pub fn to_archive(&self, ar: &mut Archive) -> Result<()> {
        self.fine.to_archive("octree.fine", ar)?;
        self.coarse.to_archive("octree.coarse", ar)
    }

    pub fn from_archive(ar: &Archive) -> Result<DualOctree> {
        let fine = SparseGrid::from_archive("octree.fine", ar)?;
        let coarse = SparseGrid::from_archive("octree.coarse", ar)?;
        if fine.level() <= coarse.level() {
            return Err(Error::Format("fine level must exceed coarse level".into()));
        }
        Ok(DualOctree { fine, coarse })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(p: [f64; 3], f: Vec<f64>, d: f64) -> LiftedPoint {
        LiftedPoint {
            position: Vec3::from(p),
            feature: f,
            density: d,
        }
    }

    fn unit() -> Contraction {
        Contraction::new([1.0, 1.0, 1.0], 0.8).unwrap()
    }

    fn line_grid(features: &[f64]) -> SparseGrid {
        let keys: Vec<u64> = (0..features.len() as u32).map(|x| morton_encode([x + 3, 4, 4])).collect();
        let cells = Arc::new(CellIndex::new(4, keys).unwrap());
        SparseGrid::from_parts(cells, 1, features.to_vec(), vec![1.0; features.len()], vec![1; features.len()]).unwrap()
    }

    #[test]
    fn mean_of_two_points() {
        let pts = vec![
            point([0.1, 0.1, 0.1], vec![1.0, 4.0], 2.0),
            point([0.1001, 0.1, 0.1], vec![3.0, 0.0], 4.0),
        ];
        let oct = build(&pts, &unit(), 5, 3, DEFAULT_DENSITY_FLOOR).unwrap();
        assert_eq!(oct.fine.len(), 1);
        assert_eq!(oct.fine.feature(0), &[2.0, 2.0]);
        assert_eq!(oct.fine.density()[0], 3.0);
        assert_eq!(oct.fine.count()[0], 2);
        assert_eq!(oct.coarse.len(), 1);
    }

    #[test]
    fn floor_drops_empty_points() {
        let pts = vec![point([0.1, 0.1, 0.1], vec![1.0], 0.0), point([0.5, 0.1, 0.1], vec![1.0], 1e-9)];
        let oct = build(&pts, &unit(), 5, 3, DEFAULT_DENSITY_FLOOR).unwrap();
        assert!(oct.fine.is_empty() && oct.coarse.is_empty());
    }

    #[test]
    fn pooled_cell_zero_fills_coarse_part() {
        let fine = SparseGrid::from_parts(
            Arc::new(CellIndex::new(5, vec![morton_encode([9, 9, 9])]).unwrap()),
            2,
            vec![1.0, 2.0],
            vec![0.5],
            vec![1],
        )
        .unwrap();
        let coarse = SparseGrid::from_parts(
            Arc::new(CellIndex::new(3, vec![morton_encode([0, 0, 0])]).unwrap()),
            2,
            vec![7.0, 8.0],
            vec![0.25],
            vec![3],
        )
        .unwrap();
        let out = downsample_concat(&DualOctree { fine, coarse }).unwrap();
        assert_eq!(out.coarse.len(), 2);
        let lone = out.coarse.cells().find(morton_encode([0, 0, 0])).unwrap();
        assert_eq!(out.coarse.feature(lone), &[7.0, 8.0, 0.0, 0.0]);
        let pooled = out.coarse.cells().find(morton_encode([2, 2, 2])).unwrap();
        assert_eq!(out.coarse.feature(pooled), &[0.0, 0.0, 1.0, 2.0]);
        assert_eq!(out.coarse.density()[pooled], 0.5);
    }

    #[test]
    fn identity_kernel_is_identity() {
        let g = line_grid(&[1.0, -2.0, 3.5]);
        let out = sparse_conv(&g, &ConvKernel::identity(1)).unwrap();
        assert_eq!(out.features(), g.features());
        assert_eq!(out.density(), g.density());
    }

    #[test]
    fn isolated_cell_all_ones() {
        let g = line_grid(&[5.0]);
        let k = ConvKernel::new(1, 1, vec![1.0; 27], vec![0.0]).unwrap();
        assert_eq!(sparse_conv(&g, &k).unwrap().features(), &[5.0]);
    }

    #[test]
    fn line_of_three_all_ones() {
        let g = line_grid(&[1.0, 2.0, 3.0]);
        let k = ConvKernel::new(1, 1, vec![1.0; 27], vec![0.0]).unwrap();
        assert_eq!(sparse_conv(&g, &k).unwrap().features(), &[3.0, 6.0, 5.0]);
    }

    #[test]
    fn width_mismatch() {
        let g = line_grid(&[1.0]);
        assert!(matches!(sparse_conv(&g, &ConvKernel::identity(2)), Err(Error::Shape(_))));
    }

    #[test]
    fn complement_rule() {
        let pts = vec![point([0.05, 0.05, 0.05], vec![1.0], 2.0)];
        let oct = build(&pts, &unit(), 6, 2, 0.0).unwrap();
        let c = unit();
        assert_eq!(query_density(&oct, &c.contract(&Vec3::new(0.05, 0.05, 0.05))), 2.0);
        let coarse_only = DualOctree {
            fine: SparseGrid::empty(6, 1).unwrap(),
            coarse: oct.coarse.clone(),
        };
        assert_eq!(query_density(&coarse_only, &c.contract(&Vec3::new(0.05, 0.05, 0.05))), 2.0);
        assert_eq!(query_density(&oct, &Vec3::new(-0.9, -0.9, -0.9)), 0.0);
        assert_eq!(query_feature(&oct, &Vec3::new(-0.9, -0.9, -0.9)), vec![0.0, 0.0]);
    }

    #[test]
    fn archive_round_trip() {
        let pts: Vec<LiftedPoint> = (0..50)
            .map(|i| point([i as f64 * 0.03 - 0.7, 0.2, -0.1], vec![i as f64, 1.0], 0.5 + i as f64))
            .collect();
        let oct = build(&pts, &unit(), 7, 4, 0.0).unwrap();
        let mut ar = Archive::new();
        oct.to_archive(&mut ar).unwrap();
        assert_eq!(DualOctree::from_archive(&ar).unwrap(), oct);
        let empty = DualOctree::empty(7, 4, 2, 2).unwrap();
        let mut ar = Archive::new();
        empty.to_archive(&mut ar).unwrap();
        assert_eq!(DualOctree::from_archive(&ar).unwrap(), empty);
    }
}
