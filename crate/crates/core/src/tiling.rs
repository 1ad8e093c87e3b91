//! SLIC superpixels driven by a spectral distance, connectivity repair and
//! fixed-size patch extraction.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cube::{
    angle_from, checked_volume, dot, l2_unchecked, norm, write_atomic, HsiCube, LabelMap, Reader,
    SpectralDistance, MIN_SAM_NORM,
};
use crate::error::{Error, Result};
use crate::par;

/// Magic bytes of the serialized per-pixel tile assignment.
pub const TILEMAP_MAGIC: &[u8; 4] = b"HST1";

/// Fraction of pixels that must share the majority class for a tile to count as label-uniform.
pub const UNIFORM_LABEL_FRACTION: f32 = 0.99;

/// One superpixel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tile {
    pub id: usize,
    /// Flat pixel indices `y * width + x`, ascending.
    #[serde(skip)]
    pub pixels: Vec<usize>,
    pub pixel_count: usize,
    pub centroid: (f64, f64),
    pub mean_spectrum: Vec<f32>,
    pub label: Option<u8>,
    /// Fraction of pixels carrying `label`.
    pub label_purity: f32,
}

impl Tile {
    pub fn is_label_uniform(&self) -> bool {
        self.label.is_some() && self.label_purity >= UNIFORM_LABEL_FRACTION
    }

    /// Pixel coordinates `(x, y)` for a map of the given width.
    pub fn coords(&self, width: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.pixels.iter().map(move |&p| (p % width, p / width))
    }
}

/// Per-pixel tile assignment with per-tile statistics. Tile ids are `0..tiles.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct TileMap {
    pub width: usize,
    pub height: usize,
    pub assignment: Vec<u32>,
    pub tiles: Vec<Tile>,
}

impl TileMap {
    /// Builds tiles from a per-pixel assignment. Ids are compacted to `0..N`
    /// preserving their relative order; empty ids disappear.
    pub fn from_assignment(cube: &HsiCube, mut assignment: Vec<u32>) -> Result<Self> {
        let (width, height, channels) = (cube.width(), cube.height(), cube.channels());
        if assignment.len() != width * height {
            return Err(Error::shape(
                "TileMap::from_assignment",
                format!(
                    "assignment has {} entries for a {width}x{height} cube",
                    assignment.len()
                ),
            ));
        }
        compact_ids(&mut assignment);
        let n = assignment.iter().map(|&a| a as usize + 1).max().unwrap_or(0);
        let mut pixels: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (p, &a) in assignment.iter().enumerate() {
            pixels[a as usize].push(p);
        }
        let tiles = pixels
            .into_iter()
            .enumerate()
            .map(|(id, px)| {
                let mut sx = 0.0;
                let mut sy = 0.0;
                let mut spec = vec![0f64; channels];
                for &p in &px {
                    sx += (p % width) as f64;
                    sy += (p / width) as f64;
                    for (acc, &v) in spec.iter_mut().zip(cube.spectrum(p)) {
                        *acc += v as f64;
                    }
                }
                let cnt = px.len() as f64;
                Tile {
                    id,
                    pixel_count: px.len(),
                    centroid: (sx / cnt, sy / cnt),
                    mean_spectrum: spec.iter().map(|&s| (s / cnt) as f32).collect(),
                    pixels: px,
                    label: None,
                    label_purity: 0.0,
                }
            })
            .collect();
        Ok(TileMap {
            width,
            height,
            assignment,
            tiles,
        })
    }

    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    /// Assigns each tile the majority class of `labels` and records its purity.
    pub fn assign_labels(&mut self, labels: &LabelMap) -> Result<()> {
        if labels.width != self.width || labels.height != self.height {
            return Err(Error::shape(
                "assign_labels",
                format!(
                    "label map {}x{} vs tile map {}x{}",
                    labels.width, labels.height, self.width, self.height
                ),
            ));
        }
        for tile in &mut self.tiles {
            let mut counts = [0usize; 256];
            for &p in &tile.pixels {
                counts[labels.data[p] as usize] += 1;
            }
            let (best, &cnt) = counts
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                .expect("non-empty counts");
            tile.label = Some(best as u8);
            tile.label_purity = cnt as f32 / tile.pixel_count as f32;
        }
        Ok(())
    }

    /// Mean tile size in pixels.
    pub fn mean_tile_size(&self) -> f64 {
        (self.width * self.height) as f64 / self.tiles.len().max(1) as f64
    }

    pub fn encode_assignment(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.assignment.len());
        out.extend_from_slice(TILEMAP_MAGIC);
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        for a in &self.assignment {
            out.extend_from_slice(&a.to_le_bytes());
        }
        out
    }

    /// Writes the binary assignment to `path` and tile statistics to `<path>.json`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        write_atomic(path, &self.encode_assignment())?;
        write_atomic(
            &sidecar_path(path),
            serde_json::to_string_pretty(&self.tiles)?.as_bytes(),
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        let mut r = Reader::new(&bytes);
        r.magic(TILEMAP_MAGIC)?;
        let width = r.u32("width")? as usize;
        let height = r.u32("height")? as usize;
        let n = checked_volume(&[width, height, 4], 4)?;
        let raw = r.take(n, "assignment")?;
        r.finish("assignment")?;
        let assignment: Vec<u32> = raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut tiles: Vec<Tile> = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
        for t in &mut tiles {
            t.pixels.clear();
        }
        for (p, &a) in assignment.iter().enumerate() {
            let tile = tiles.get_mut(a as usize).ok_or_else(|| {
                Error::format(12 + 4 * p as u64, format!("tile id {a} missing from sidecar"))
            })?;
            tile.pixels.push(p);
        }
        if let Some(t) = tiles.iter().find(|t| t.pixels.len() != t.pixel_count) {
            return Err(Error::Config(format!(
                "sidecar pixel count mismatch for tile {}",
                t.id
            )));
        }
        Ok(TileMap {
            width,
            height,
            assignment,
            tiles,
        })
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn compact_ids(assignment: &mut [u32]) {
    let n = assignment.iter().map(|&a| a as usize + 1).max().unwrap_or(0);
    let mut used = vec![false; n];
    for &a in assignment.iter() {
        used[a as usize] = true;
    }
    let mut remap = vec![u32::MAX; n];
    let mut next = 0u32;
    for (old, u) in used.iter().enumerate() {
        if *u {
            remap[old] = next;
            next += 1;
        }
    }
    if next as usize == n {
        return;
    }
    for a in assignment.iter_mut() {
        *a = remap[*a as usize];
    }
}

/// SLIC parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlicParams {
    pub target_pixels_per_tile: usize,
    /// Weight of the normalized spatial term relative to the spectral distance.
    pub compactness: f64,
    pub max_iters: usize,
    pub distance: SpectralDistance,
    /// Iteration stops once the summed center displacement falls below this (pixels).
    pub convergence_px: f64,
    pub enforce_connectivity: bool,
}

impl SlicParams {
    /// Defaults for a distance: compactness 0.1 for SAM (radians) and 1.0 for L2.
    pub fn for_distance(distance: SpectralDistance) -> Self {
        SlicParams {
            target_pixels_per_tile: 200,
            compactness: match distance {
                SpectralDistance::Sam => 0.1,
                SpectralDistance::L2 => 1.0,
            },
            max_iters: 10,
            distance,
            convergence_px: 0.1,
            enforce_connectivity: true,
        }
    }

    /// Grid step between initial centers.
    pub fn grid_step(&self) -> f64 {
        (self.target_pixels_per_tile as f64).sqrt()
    }
}

impl Default for SlicParams {
    fn default() -> Self {
        Self::for_distance(SpectralDistance::Sam)
    }
}

/// Diagnostics of a SLIC run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SlicTrace {
    /// Total objective (sum over pixels of the combined distance to the assigned
    /// center) after each assignment step.
    pub objective: Vec<f64>,
    pub iterations: usize,
    pub initial_centers: usize,
}

struct Center {
    x: f64,
    y: f64,
    spectrum: Vec<f32>,
    norm: f64,
}

/// Runs SLIC on `cube`.
pub fn slic_segment(cube: &HsiCube, params: &SlicParams) -> Result<TileMap> {
    slic_segment_traced(cube, params).map(|(m, _)| m)
}

/// Runs SLIC and also returns per-iteration diagnostics.
pub fn slic_segment_traced(cube: &HsiCube, params: &SlicParams) -> Result<(TileMap, SlicTrace)> {
    let (w, h, c) = (cube.width(), cube.height(), cube.channels());
    if w < 8 || h < 8 {
        return Err(Error::Config(format!("cube {w}x{h} is smaller than 8x8")));
    }
    if params.target_pixels_per_tile < 4 {
        return Err(Error::Config("target_pixels_per_tile must be >= 4".into()));
    }
    if !(params.compactness > 0.0) {
        return Err(Error::Config("compactness must be positive".into()));
    }
    let n = w * h;
    let k = (n as f64 / params.target_pixels_per_tile as f64).round() as usize;
    if k == 0 {
        return Err(Error::Config(format!(
            "cube of {n} pixels is smaller than one grid cell of {} pixels",
            params.target_pixels_per_tile
        )));
    }
    let step = params.grid_step();
    let nx = ((w as f64 / step).round() as usize).max(1);
    let ny = ((h as f64 / step).round() as usize).max(1);

    let mut centers: Vec<Center> = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            // Pixel-index coordinates: pixel x spans [x - 0.5, x + 0.5].
            let x = (i as f64 + 0.5) * w as f64 / nx as f64 - 0.5;
            let y = (j as f64 + 0.5) * h as f64 / ny as f64 - 0.5;
            let px = (x.round().max(0.0) as usize).min(w - 1);
            let py = (y.round().max(0.0) as usize).min(h - 1);
            let spectrum = cube.spectrum_at(px, py).to_vec();
            let nrm = norm(&spectrum);
            centers.push(Center {
                x,
                y,
                spectrum,
                norm: nrm,
            });
        }
    }

    let pixel_norms: Vec<f64> = (0..n).map(|p| norm(cube.spectrum(p))).collect();
    let spatial_scale = params.compactness / step;
    let spectral = |p: usize, ctr: &Center| -> f64 {
        match params.distance {
            SpectralDistance::L2 => l2_unchecked(cube.spectrum(p), &ctr.spectrum),
            SpectralDistance::Sam => {
                let np = pixel_norms[p];
                match (np < MIN_SAM_NORM, ctr.norm < MIN_SAM_NORM) {
                    (true, true) => 0.0,
                    (true, false) | (false, true) => std::f64::consts::FRAC_PI_2,
                    (false, false) => angle_from(dot(cube.spectrum(p), &ctr.spectrum), np, ctr.norm),
                }
            }
        }
    };
    let combined_sq = |p: usize, ctr: &Center| -> f64 {
        let (x, y) = ((p % w) as f64, (p / w) as f64);
        let ds = spectral(p, ctr);
        let dxy = ((x - ctr.x).powi(2) + (y - ctr.y).powi(2)).sqrt() * spatial_scale;
        ds * ds + dxy * dxy
    };

    let mut labels = vec![0u32; n];
    let mut trace = SlicTrace {
        initial_centers: centers.len(),
        ..SlicTrace::default()
    };

    for iter in 0..params.max_iters.max(1) {
        trace.iterations += 1;
        // Assignment: each pixel considers centers whose 2S x 2S window covers it.
        let rows: Vec<Vec<(u32, f64)>> = par::map_range(h, |y| {
            let yf = y as f64;
            let band: Vec<usize> = (0..centers.len())
                .filter(|&ci| (centers[ci].y - yf).abs() <= step)
                .collect();
            (0..w)
                .map(|x| {
                    let p = y * w + x;
                    let xf = x as f64;
                    let mut best = (u32::MAX, f64::INFINITY);
                    for &ci in &band {
                        if (centers[ci].x - xf).abs() > step {
                            continue;
                        }
                        let d = combined_sq(p, &centers[ci]);
                        if d < best.1 {
                            best = (ci as u32, d);
                        }
                    }
                    if iter > 0 {
                        // The current center stays a candidate even outside the window.
                        let cur = labels[p];
                        let d = combined_sq(p, &centers[cur as usize]);
                        if d <= best.1 {
                            best = (cur, d);
                        }
                    } else if best.0 == u32::MAX {
                        for (ci, ctr) in centers.iter().enumerate() {
                            let d = combined_sq(p, ctr);
                            if d < best.1 {
                                best = (ci as u32, d);
                            }
                        }
                    }
                    best
                })
                .collect()
        });
        let mut objective = 0.0;
        let mut member_cost = vec![0f64; centers.len()];
        for (y, row) in rows.into_iter().enumerate() {
            for (x, (ci, d)) in row.into_iter().enumerate() {
                labels[y * w + x] = ci;
                objective += d.sqrt();
                member_cost[ci as usize] += d.sqrt();
            }
        }
        trace.objective.push(objective);

        // Update: centers move to the mean position and mean spectrum of their members.
        let mut sums = vec![(0f64, 0f64, 0usize); centers.len()];
        let mut spec = vec![0f64; centers.len() * c];
        for (p, &l) in labels.iter().enumerate() {
            let l = l as usize;
            sums[l].0 += (p % w) as f64;
            sums[l].1 += (p / w) as f64;
            sums[l].2 += 1;
            for (acc, &v) in spec[l * c..(l + 1) * c].iter_mut().zip(cube.spectrum(p)) {
                *acc += v as f64;
            }
        }
        let proposed: Vec<Option<Center>> = sums
            .iter()
            .enumerate()
            .map(|(ci, &(sx, sy, cnt))| {
                (cnt > 0).then(|| {
                    let cnt_f = cnt as f64;
                    let spectrum: Vec<f32> =
                        spec[ci * c..(ci + 1) * c].iter().map(|&s| (s / cnt_f) as f32).collect();
                    let nrm = norm(&spectrum);
                    Center {
                        x: sx / cnt_f,
                        y: sy / cnt_f,
                        spectrum,
                        norm: nrm,
                    }
                })
            })
            .collect();
        // A move is kept only if it lowers the summed distance of the center's members,
        // so the objective can never rise between iterations.
        let new_rows: Vec<Vec<f64>> = par::map_range(h, |y| {
            (0..w)
                .map(|x| {
                    let p = y * w + x;
                    proposed[labels[p] as usize]
                        .as_ref()
                        .map_or(0.0, |ctr| combined_sq(p, ctr).sqrt())
                })
                .collect()
        });
        let mut new_cost = vec![0f64; centers.len()];
        for (p, d) in new_rows.into_iter().flatten().enumerate() {
            new_cost[labels[p] as usize] += d;
        }
        let mut movement = 0.0;
        for (ci, cand) in proposed.into_iter().enumerate() {
            let Some(cand) = cand else { continue };
            if new_cost[ci] < member_cost[ci] {
                let ctr = &mut centers[ci];
                movement += ((cand.x - ctr.x).powi(2) + (cand.y - ctr.y).powi(2)).sqrt();
                *ctr = cand;
            }
        }
        if movement < params.convergence_px {
            break;
        }
    }

    let map = TileMap::from_assignment(cube, labels)?;
    let map = if params.enforce_connectivity {
        enforce_connectivity(&map, cube, (params.target_pixels_per_tile / 4).max(1))
    } else {
        map
    };
    Ok((map, trace))
}

const NEIGHBORS4: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

fn neighbors4(p: usize, w: usize, h: usize) -> impl Iterator<Item = usize> {
    let (x, y) = ((p % w) as isize, (p / w) as isize);
    NEIGHBORS4.into_iter().filter_map(move |(dx, dy)| {
        let (nx, ny) = (x + dx, y + dy);
        (nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h)
            .then(|| ny as usize * w + nx as usize)
    })
}

/// 4-connected components of equal assignment. Returns per-pixel component ids and
/// component sizes; components are numbered in raster order of their first pixel.
pub(crate) fn connected_components(assignment: &[u32], w: usize, h: usize) -> (Vec<usize>, Vec<usize>) {
    let mut comp = vec![usize::MAX; assignment.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..assignment.len() {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let tile = assignment[start];
        comp[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(p) = queue.pop_front() {
            size += 1;
            for q in neighbors4(p, w, h) {
                if comp[q] == usize::MAX && assignment[q] == tile {
                    comp[q] = id;
                    queue.push_back(q);
                }
            }
        }
        sizes.push(size);
    }
    (comp, sizes)
}

/// Makes every tile 4-connected.
///
/// Each tile keeps its largest component. Other fragments with fewer than
/// `min_fragment` pixels are merged into the largest adjacent region; bigger ones
/// become tiles of their own. Tile statistics are recomputed from `cube`.
pub fn enforce_connectivity(map: &TileMap, cube: &HsiCube, min_fragment: usize) -> TileMap {
    let (w, h) = (map.width, map.height);
    let (comp, sizes) = connected_components(&map.assignment, w, h);
    let ncomp = sizes.len();
    let mut comp_tile = vec![0u32; ncomp];
    for (p, &c) in comp.iter().enumerate() {
        comp_tile[c] = map.assignment[p];
    }
    // Largest component per tile (first in raster order on ties).
    let ntiles = map.tiles.len();
    let mut main = vec![usize::MAX; ntiles];
    for c in 0..ncomp {
        let t = comp_tile[c] as usize;
        if main[t] == usize::MAX || sizes[c] > sizes[main[t]] {
            main[t] = c;
        }
    }
    if ncomp == ntiles {
        return map.clone();
    }

    // Adjacency between components.
    let mut adjacent: Vec<Vec<usize>> = vec![Vec::new(); ncomp];
    for p in 0..comp.len() {
        for q in neighbors4(p, w, h) {
            if comp[q] != comp[p] && !adjacent[comp[p]].contains(&comp[q]) {
                adjacent[comp[p]].push(comp[q]);
            }
        }
    }

    // Union-find over components; small fragments join their largest neighbor group.
    let mut parent: Vec<usize> = (0..ncomp).collect();
    let mut group_size = sizes.clone();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let is_fragment = |c: usize| main[comp_tile[c] as usize] != c && sizes[c] < min_fragment;
    let mut fragments: Vec<usize> = (0..ncomp).filter(|&c| is_fragment(c)).collect();
    fragments.sort_by_key(|&c| (sizes[c], c));
    for &f in &fragments {
        let root_f = find(&mut parent, f);
        let mut best: Option<(usize, usize)> = None;
        for &nb in &adjacent[f] {
            let r = find(&mut parent, nb);
            if r == root_f {
                continue;
            }
            let cand = (group_size[r], r);
            best = match best {
                Some(b) if b.0 > cand.0 || (b.0 == cand.0 && b.1 < cand.1) => Some(b),
                _ => Some(cand),
            };
        }
        if let Some((_, target)) = best {
            parent[root_f] = target;
            group_size[target] += group_size[root_f];
        }
    }

    // A merged group takes the id of the tile whose main component it contains; other
    // groups (large fragments) get fresh ids after the original ones.
    let mut group_id = vec![u32::MAX; ncomp];
    for t in 0..ntiles {
        if main[t] != usize::MAX {
            let r = find(&mut parent, main[t]);
            group_id[r] = t as u32;
        }
    }
    let mut next = ntiles as u32;
    let mut assignment = vec![0u32; comp.len()];
    for (p, &c) in comp.iter().enumerate() {
        let r = find(&mut parent, c);
        if group_id[r] == u32::MAX {
            group_id[r] = next;
            next += 1;
        }
        assignment[p] = group_id[r];
    }
    let mut out = TileMap::from_assignment(cube, assignment).expect("assignment matches cube");
    for t in &mut out.tiles {
        t.label = None;
    }
    out
}

/// Zero-padded fixed-size crop of one tile, stored `(y, x, band)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub size: usize,
    pub channels: usize,
    pub data: Vec<f32>,
    /// True when the tile did not fit and was cropped around its centroid.
    pub cropped: bool,
}

impl Patch {
    pub fn zeros(size: usize, channels: usize) -> Self {
        Patch {
            size,
            channels,
            data: vec![0.0; size * size * channels],
            cropped: false,
        }
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize, band: usize) -> usize {
        (y * self.size + x) * self.channels + band
    }

    /// Writes the patch as a channel-first `(band, y, x)` block into `out`.
    pub fn write_chw(&self, out: &mut [f32]) {
        let hw = self.size * self.size;
        debug_assert_eq!(out.len(), hw * self.channels);
        for (p, px) in self.data.chunks_exact(self.channels).enumerate() {
            for (b, &v) in px.iter().enumerate() {
                out[b * hw + p] = v;
            }
        }
    }
}

/// Copies the tile's pixels into a `patch_size x patch_size` patch, centered on the
/// tile's bounding box. Axes along which the tile is too large are cropped to a
/// window centered on the centroid.
pub fn extract_tile_patch(cube: &HsiCube, tile: &Tile, patch_size: usize) -> Patch {
    let mut patch = Patch::zeros(patch_size, cube.channels());
    write_tile_patch(cube, tile, &mut patch);
    patch
}

/// As [`extract_tile_patch`], reusing an existing buffer.
pub fn write_tile_patch(cube: &HsiCube, tile: &Tile, patch: &mut Patch) {
    let w = cube.width();
    let size = patch.size as isize;
    patch.data.iter_mut().for_each(|v| *v = 0.0);
    patch.cropped = false;
    if tile.pixels.is_empty() {
        return;
    }
    let (mut minx, mut maxx, mut miny, mut maxy) = (usize::MAX, 0, usize::MAX, 0);
    for (x, y) in tile.coords(w) {
        minx = minx.min(x);
        maxx = maxx.max(x);
        miny = miny.min(y);
        maxy = maxy.max(y);
    }
    let offset = |lo: usize, hi: usize, centroid: f64, cropped: &mut bool| -> isize {
        let extent = (hi - lo + 1) as isize;
        if extent <= size {
            (size - extent) / 2 - lo as isize
        } else {
            *cropped = true;
            size / 2 - centroid.round() as isize
        }
    };
    let mut cropped = false;
    let ox = offset(minx, maxx, tile.centroid.0, &mut cropped);
    let oy = offset(miny, maxy, tile.centroid.1, &mut cropped);
    patch.cropped = cropped;
    let ch = patch.channels;
    for &p in &tile.pixels {
        let px = (p % w) as isize + ox;
        let py = (p / w) as isize + oy;
        if px < 0 || py < 0 || px >= size || py >= size {
            continue;
        }
        let dst = patch.idx(px as usize, py as usize, 0);
        patch.data[dst..dst + ch].copy_from_slice(cube.spectrum(p));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn uniform_cube(w: usize, h: usize, c: usize, v: f32) -> HsiCube {
        HsiCube::new(w, h, HsiCube::linear_wavelengths(c, 450.0, 800.0), vec![v; w * h * c])
            .unwrap()
            .0
    }

    fn noise_cube(w: usize, h: usize, c: usize, seed: u64) -> HsiCube {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = (0..w * h * c).map(|_| rng.gen_range(0.05f32..0.95)).collect();
        HsiCube::new(w, h, HsiCube::linear_wavelengths(c, 450.0, 800.0), data)
            .unwrap()
            .0
    }

    pub(crate) fn all_connected(map: &TileMap) -> bool {
        let (_, sizes) = connected_components(&map.assignment, map.width, map.height);
        sizes.len() == map.tiles.len()
    }

    #[test]
    fn uniform_cube_gives_grid() {
        let cube = uniform_cube(64, 64, 3, 0.4);
        let mut p = SlicParams::default();
        p.target_pixels_per_tile = 256;
        let map = slic_segment(&cube, &p).unwrap();
        assert_eq!(map.tiles.len(), 16);
        for t in &map.tiles {
            assert_eq!(t.pixel_count, 256, "tile {} has {} px", t.id, t.pixel_count);
        }
    }

    #[test]
    fn single_tile_when_target_covers_image() {
        let cube = noise_cube(16, 16, 3, 1);
        let mut p = SlicParams::default();
        p.target_pixels_per_tile = 256;
        let map = slic_segment(&cube, &p).unwrap();
        assert_eq!(map.tiles.len(), 1);
        assert_eq!(map.tiles[0].pixel_count, 256);
    }

    #[test]
    fn rejects_bad_configuration() {
        let cube = uniform_cube(8, 8, 2, 0.5);
        let mut p = SlicParams::default();
        p.target_pixels_per_tile = 1000;
        assert!(matches!(slic_segment(&cube, &p), Err(Error::Config(_))));
        let small = uniform_cube(7, 9, 2, 0.5);
        assert!(slic_segment(&small, &SlicParams::default()).is_err());
        p.target_pixels_per_tile = 16;
        p.compactness = 0.0;
        assert!(slic_segment(&cube, &p).is_err());
    }

    #[test]
    fn sam_tiles_respect_spectral_step() {
        // Left half spectrum (0.8, 0.2, 0.2), right half (0.2, 0.2, 0.8); different
        // brightness on each side so only the angle separates them.
        let (w, h) = (64usize, 48usize);
        let mut data = Vec::with_capacity(w * h * 3);
        for _y in 0..h {
            for x in 0..w {
                if x < 29 {
                    data.extend_from_slice(&[0.8, 0.2, 0.2]);
                } else {
                    data.extend_from_slice(&[0.1, 0.1, 0.4]);
                }
            }
        }
        let cube = HsiCube::new(w, h, vec![1.0, 2.0, 3.0], data).unwrap().0;
        let mut p = SlicParams::for_distance(SpectralDistance::Sam);
        p.target_pixels_per_tile = 100;
        let map = slic_segment(&cube, &p).unwrap();
        for t in &map.tiles {
            let left = t.coords(w).filter(|&(x, _)| x < 29).count();
            let right = t.pixel_count - left;
            // Straddling is allowed only within a 1-px band around the step.
            let straddle = left.min(right);
            let band_px = t.coords(w).filter(|&(x, _)| x == 28 || x == 29).count();
            assert!(straddle == 0 || straddle <= band_px, "tile {} straddles", t.id);
        }
    }

    #[test]
    fn connectivity_repair_on_noise() {
        for seed in 0..3 {
            let cube = noise_cube(48, 40, 4, seed);
            let mut p = SlicParams::default();
            p.target_pixels_per_tile = 60;
            let map = slic_segment(&cube, &p).unwrap();
            assert!(all_connected(&map));
            let total: usize = map.tiles.iter().map(|t| t.pixel_count).sum();
            assert_eq!(total, 48 * 40);
        }
    }

    #[test]
    fn connected_map_is_unchanged() {
        let cube = uniform_cube(8, 8, 2, 0.3);
        let assignment: Vec<u32> = (0..64).map(|p| if p % 8 < 4 { 0 } else { 1 }).collect();
        let map = TileMap::from_assignment(&cube, assignment.clone()).unwrap();
        let fixed = enforce_connectivity(&map, &cube, 4);
        assert_eq!(fixed.assignment, assignment);
    }

    #[test]
    fn small_fragment_is_absorbed() {
        let cube = uniform_cube(8, 8, 2, 0.3);
        // Tile 0 = left half plus a 2-pixel island inside the right half.
        let mut assignment: Vec<u32> = (0..64).map(|p| if p % 8 < 4 { 0 } else { 1 }).collect();
        assignment[3 * 8 + 6] = 0;
        assignment[3 * 8 + 7] = 0;
        let map = TileMap::from_assignment(&cube, assignment).unwrap();
        let fixed = enforce_connectivity(&map, &cube, 4);
        assert_eq!(fixed.tiles.len(), 2);
        assert_eq!(fixed.assignment[3 * 8 + 6], 1);
        assert_eq!(fixed.assignment[3 * 8 + 7], 1);
        assert_eq!(fixed.tiles[0].pixel_count, 32);
    }

    #[test]
    fn large_fragment_becomes_own_tile() {
        let cube = uniform_cube(8, 8, 2, 0.3);
        let mut assignment: Vec<u32> = (0..64).map(|p| if p % 8 < 4 { 0 } else { 1 }).collect();
        for y in 0..3 {
            assignment[y * 8 + 7] = 0;
        }
        let map = TileMap::from_assignment(&cube, assignment).unwrap();
        let fixed = enforce_connectivity(&map, &cube, 2);
        assert_eq!(fixed.tiles.len(), 3);
        assert!(all_connected(&fixed));
    }

    fn single_pixel_tile(cube: &HsiCube, x: usize, y: usize) -> Tile {
        let p = y * cube.width() + x;
        Tile {
            id: 0,
            pixels: vec![p],
            pixel_count: 1,
            centroid: (x as f64, y as f64),
            mean_spectrum: cube.spectrum(p).to_vec(),
            label: None,
            label_purity: 0.0,
        }
    }

    #[test]
    fn one_pixel_patch_is_centered() {
        let cube = noise_cube(10, 10, 5, 3);
        let tile = single_pixel_tile(&cube, 7, 2);
        let patch = extract_tile_patch(&cube, &tile, 48);
        let nonzero: Vec<usize> = (0..48 * 48)
            .filter(|&p| patch.data[p * 5..(p + 1) * 5].iter().any(|&v| v != 0.0))
            .collect();
        assert_eq!(nonzero, vec![23 * 48 + 23]);
        assert_eq!(&patch.data[nonzero[0] * 5..nonzero[0] * 5 + 5], cube.spectrum_at(7, 2));
        assert!(!patch.cropped);
    }

    #[test]
    fn patch_conserves_mass() {
        let cube = noise_cube(40, 40, 3, 5);
        let mut p = SlicParams::default();
        p.target_pixels_per_tile = 100;
        let map = slic_segment(&cube, &p).unwrap();
        for t in &map.tiles {
            let patch = extract_tile_patch(&cube, t, 48);
            let s_patch: f64 = patch.data.iter().map(|&v| v as f64).sum();
            let s_tile: f64 = t
                .pixels
                .iter()
                .flat_map(|&px| cube.spectrum(px))
                .map(|&v| v as f64)
                .sum();
            assert!((s_patch - s_tile).abs() < 1e-6 * s_tile.max(1.0));
        }
    }

    #[test]
    fn snake_tile_is_cropped() {
        // A 1-px-wide horizontal snake spanning 250 columns.
        let cube = uniform_cube(260, 10, 2, 0.5);
        let pixels: Vec<usize> = (0..250).map(|x| 4 * 260 + x).collect();
        let tile = Tile {
            id: 0,
            pixel_count: pixels.len(),
            pixels,
            centroid: (124.5, 4.0),
            mean_spectrum: vec![0.5, 0.5],
            label: None,
            label_purity: 0.0,
        };
        let patch = extract_tile_patch(&cube, &tile, 48);
        assert!(patch.cropped);
        let nonzero = patch.data.iter().filter(|&&v| v != 0.0).count();
        assert_eq!(nonzero, 48 * 2);
    }

    #[test]
    fn labels_use_majority_and_purity() {
        let cube = uniform_cube(8, 8, 2, 0.3);
        let assignment: Vec<u32> = (0..64).map(|p| if p % 8 < 4 { 0 } else { 1 }).collect();
        let mut map = TileMap::from_assignment(&cube, assignment).unwrap();
        let mut data = vec![1u8; 64];
        for y in 0..8 {
            for x in 4..6 {
                data[y * 8 + x] = 0;
            }
        }
        map.assign_labels(&LabelMap { width: 8, height: 8, data }).unwrap();
        assert_eq!(map.tiles[0].label, Some(1));
        assert!(map.tiles[0].is_label_uniform());
        assert!((map.tiles[1].label_purity - 0.5).abs() < 1e-6);
        assert!(!map.tiles[1].is_label_uniform());
    }

    #[test]
    fn tilemap_save_load() {
        let cube = noise_cube(24, 24, 3, 9);
        let mut p = SlicParams::default();
        p.target_pixels_per_tile = 50;
        let map = slic_segment(&cube, &p).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiles.hst");
        map.save(&path).unwrap();
        assert_eq!(TileMap::load(&path).unwrap(), map);
    }

    #[test]
    fn deterministic() {
        let cube = noise_cube(40, 40, 4, 11);
        let p = SlicParams::default();
        assert_eq!(slic_segment(&cube, &p).unwrap(), slic_segment(&cube, &p).unwrap());
    }
}
