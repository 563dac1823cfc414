//! Icosphere hierarchies and the canonical face-to-patch vertex table.
//!
//! A patch is the set of data-level vertices covered by the descendants of
//! one coarse face. Membership is read off the subdivision bookkeeping, so it
//! is exact: no spatial search is involved.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::binio::{ByteReader, ByteWriter, FormatError};

const MESH_MAGIC: [u8; 4] = *b"SMSH";
const MESH_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum GeodesyError {
    #[error("hierarchy depth must be at least 1")]
    ZeroDepth,
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Icosphere of a given subdivision level on the unit sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct IcoMesh {
    pub level: u32,
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[u32; 3]>,
}

impl IcoMesh {
    pub fn vertex_count_for(level: u32) -> usize {
        10 * 4usize.pow(level) + 2
    }

    pub fn face_count_for(level: u32) -> usize {
        20 * 4usize.pow(level)
    }

    /// Undirected edges as sorted `(lo, hi)` pairs, in ascending order.
    pub fn edges(&self) -> Vec<(u32, u32)> {
        let mut edges: Vec<(u32, u32)> = self
            .faces
            .iter()
            .flat_map(|f| [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])])
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect();
        edges.sort_unstable();
        edges.dedup();
        edges
    }

    /// Lists every violated mesh invariant; empty when the mesh is valid.
    pub fn check_invariants(&self) -> Vec<String> {
        let mut failures = Vec::new();
        let (nv, nf) = (Self::vertex_count_for(self.level), Self::face_count_for(self.level));
        if self.vertices.len() != nv {
            failures.push(format!("level {}: {} vertices, expected {nv}", self.level, self.vertices.len()));
        }
        if self.faces.len() != nf {
            failures.push(format!("level {}: {} faces, expected {nf}", self.level, self.faces.len()));
        }
        if let Some((i, v)) = self
            .vertices
            .iter()
            .enumerate()
            .find(|(_, v)| (norm(**v) - 1.0).abs() > 1e-9)
        {
            failures.push(format!("vertex {i} has norm {}", norm(*v)));
        }
        let n = self.vertices.len() as u32;
        if self.faces.iter().flatten().any(|&i| i >= n) {
            failures.push("face index out of range".to_string());
        }
        let mut edge_use: HashMap<(u32, u32), u32> = HashMap::new();
        for f in &self.faces {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                *edge_use.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        let bad = edge_use.values().filter(|&&c| c != 2).count();
        if bad > 0 {
            failures.push(format!("{bad} edges not shared by exactly two faces"));
        }
        failures
    }
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn normalized(v: [f64; 3]) -> [f64; 3] {
    let n = norm(v);
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Regular icosahedron from golden-ratio rectangles, outward-oriented faces.
pub fn icosahedron() -> IcoMesh {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let raw = [
        [-1.0, phi, 0.0],
        [1.0, phi, 0.0],
        [-1.0, -phi, 0.0],
        [1.0, -phi, 0.0],
        [0.0, -1.0, phi],
        [0.0, 1.0, phi],
        [0.0, -1.0, -phi],
        [0.0, 1.0, -phi],
        [phi, 0.0, -1.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, -1.0],
        [-phi, 0.0, 1.0],
    ];
    let faces = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    IcoMesh {
        level: 0,
        vertices: raw.iter().map(|v| normalized(*v)).collect(),
        faces,
    }
}

/// Splits every face into four at the projected edge midpoints.
///
/// Parent vertices keep their indices; midpoints are numbered after them in
/// ascending sorted-edge order. Face `f` spawns faces `4f..4f + 4`, ordered
/// `[a, ab, ca]`, `[ab, b, bc]`, `[ca, bc, c]`, `[ab, bc, ca]`.
pub fn subdivide(mesh: &IcoMesh) -> IcoMesh {
    let edges = mesh.edges();
    let base = mesh.vertices.len() as u32;
    let mut vertices = mesh.vertices.clone();
    vertices.reserve(edges.len());
    let mut midpoint: HashMap<(u32, u32), u32> = HashMap::with_capacity(edges.len());
    for (k, &(a, b)) in edges.iter().enumerate() {
        let (va, vb) = (mesh.vertices[a as usize], mesh.vertices[b as usize]);
        vertices.push(normalized([va[0] + vb[0], va[1] + vb[1], va[2] + vb[2]]));
        midpoint.insert((a, b), base + k as u32);
    }
    let mid = |a: u32, b: u32| midpoint[&(a.min(b), a.max(b))];
    let mut faces = Vec::with_capacity(mesh.faces.len() * 4);
    for &[a, b, c] in &mesh.faces {
        let (ab, bc, ca) = (mid(a, b), mid(b, c), mid(c, a));
        faces.extend_from_slice(&[[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]]);
    }
    IcoMesh {
        level: mesh.level + 1,
        vertices,
        faces,
    }
}

/// Icosphere of the given level.
pub fn icosphere(level: u32) -> IcoMesh {
    (0..level).fold(icosahedron(), |m, _| subdivide(&m))
}

/// Meshes from the patch level up to the data level.
#[derive(Debug, Clone)]
pub struct IcoHierarchy {
    pub meshes: Vec<IcoMesh>,
    /// `child_faces[j][f]` are the four faces of `meshes[j + 1]` spawned by
    /// face `f` of `meshes[j]`.
    pub child_faces: Vec<Vec<[u32; 4]>>,
}

impl IcoHierarchy {
    pub fn patch_level(&self) -> u32 {
        self.meshes[0].level
    }

    pub fn data_level(&self) -> u32 {
        self.meshes[self.meshes.len() - 1].level
    }

    pub fn depth(&self) -> u32 {
        (self.meshes.len() - 1) as u32
    }

    pub fn coarse(&self) -> &IcoMesh {
        &self.meshes[0]
    }

    pub fn data_mesh(&self) -> &IcoMesh {
        &self.meshes[self.meshes.len() - 1]
    }

    /// Data-level faces descending from coarse face `f`.
    pub fn descendants(&self, f: u32) -> Vec<u32> {
        let mut current = vec![f];
        for level in &self.child_faces {
            current = current.iter().flat_map(|&g| level[g as usize]).collect();
        }
        current
    }
}

pub fn build_hierarchy(patch_level: u32, depth: u32) -> Result<IcoHierarchy, GeodesyError> {
    if depth == 0 {
        return Err(GeodesyError::ZeroDepth);
    }
    let mut meshes = vec![icosphere(patch_level)];
    let mut child_faces = Vec::with_capacity(depth as usize);
    for _ in 0..depth {
        let parent = meshes.last().expect("non-empty");
        child_faces.push(
            (0..parent.faces.len() as u32)
                .map(|f| [4 * f, 4 * f + 1, 4 * f + 2, 4 * f + 3])
                .collect(),
        );
        let child = subdivide(parent);
        meshes.push(child);
    }
    Ok(IcoHierarchy { meshes, child_faces })
}

/// Data-level vertex indices of every patch.
///
/// Within a patch, vertices follow barycentric row-major order of the
/// subdivided coarse triangle `(a, b, c)`: row `r` runs from the `a` apex
/// (`r = 0`) towards edge `bc`, and within a row from the `b` side to the `c`
/// side.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTable {
    pub patch_level: u32,
    pub data_level: u32,
    pub patch_size: usize,
    /// Row-major `num_patches × patch_size`.
    indices: Vec<u32>,
    pub multiplicity: Vec<u32>,
}

impl PatchTable {
    pub fn num_patches(&self) -> usize {
        self.indices.len() / self.patch_size
    }

    pub fn num_vertices(&self) -> usize {
        self.multiplicity.len()
    }

    pub fn patch(&self, i: usize) -> &[u32] {
        &self.indices[i * self.patch_size..(i + 1) * self.patch_size]
    }

    pub fn patches(&self) -> impl Iterator<Item = &[u32]> {
        self.indices.chunks(self.patch_size)
    }

    /// `(2^d + 1)(2^d + 2) / 2` vertices per patch at depth `d`.
    pub fn patch_size_for(depth: u32) -> usize {
        let n = 1usize << depth;
        (n + 1) * (n + 2) / 2
    }
}

pub fn patch_table(h: &IcoHierarchy) -> PatchTable {
    let depth = h.depth();
    let n = 1i64 << depth;
    let patch_size = PatchTable::patch_size_for(depth);
    let coarse = h.coarse();
    let mut indices = Vec::with_capacity(coarse.faces.len() * patch_size);

    for (f, &[a, b, c]) in coarse.faces.iter().enumerate() {
        let mut slots = vec![u32::MAX; patch_size];
        // Barycentric weights on the coarse face, in units of 1/2^depth.
        let corners = [(a, [n, 0, 0]), (b, [0, n, 0]), (c, [0, 0, n])];
        collect_lattice(h, 0, f as u32, corners, &mut slots);
        debug_assert!(slots.iter().all(|&s| s != u32::MAX));
        indices.extend_from_slice(&slots);
    }

    let mut multiplicity = vec![0u32; h.data_mesh().vertices.len()];
    for &v in &indices {
        multiplicity[v as usize] += 1;
    }
    PatchTable {
        patch_level: h.patch_level(),
        data_level: h.data_level(),
        patch_size,
        indices,
        multiplicity,
    }
}

type Corner = (u32, [i64; 3]);

fn collect_lattice(h: &IcoHierarchy, level: usize, face: u32, corners: [Corner; 3], slots: &mut [u32]) {
    if level == h.child_faces.len() {
        let n: i64 = corners.iter().map(|(_, w)| w[0] + w[1] + w[2]).next().unwrap_or(0);
        for (v, w) in corners {
            let r = (n - w[0]) as usize;
            let s = w[2] as usize;
            slots[r * (r + 1) / 2 + s] = v;
        }
        return;
    }
    let mesh = &h.meshes[level + 1];
    let [ca, cb, cc] = corners;
    let mid = |p: Corner, q: Corner, child_vertex: u32| -> Corner {
        (child_vertex, [(p.1[0] + q.1[0]) / 2, (p.1[1] + q.1[1]) / 2, (p.1[2] + q.1[2]) / 2])
    };
    let children = h.child_faces[level][face as usize];
    // Child 3 is [ab, bc, ca]; it names every midpoint vertex.
    let centre = mesh.faces[children[3] as usize];
    let ab = mid(ca, cb, centre[0]);
    let bc = mid(cb, cc, centre[1]);
    let cam = mid(cc, ca, centre[2]);
    let layouts = [[ca, ab, cam], [ab, cb, bc], [cam, bc, cc], [ab, bc, cam]];
    for (child, layout) in children.iter().zip(layouts) {
        collect_lattice(h, level + 1, *child, layout, slots);
    }
}

pub fn encode_mesh(mesh: &IcoMesh) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(&MESH_MAGIC);
    w.u32(MESH_VERSION);
    w.u32(mesh.level);
    w.u64(mesh.vertices.len() as u64);
    w.u64(mesh.faces.len() as u64);
    for v in &mesh.vertices {
        v.iter().for_each(|x| w.f64(*x));
    }
    for f in &mesh.faces {
        f.iter().for_each(|i| w.u32(*i));
    }
    w.finish()
}

pub fn decode_mesh(bytes: &[u8]) -> Result<IcoMesh, FormatError> {
    let mut r = ByteReader::new(bytes);
    r.magic(MESH_MAGIC)?;
    r.version(MESH_VERSION)?;
    let level = r.u32()?;
    let nv = r.u64()? as usize;
    let nf = r.u64()? as usize;
    let needed = nv.saturating_mul(24).saturating_add(nf.saturating_mul(12));
    if needed > r.remaining() {
        return Err(FormatError::Truncated {
            needed,
            offset: bytes.len() - r.remaining(),
            available: r.remaining(),
        });
    }
    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        vertices.push([r.f64()?, r.f64()?, r.f64()?]);
    }
    let mut faces = Vec::with_capacity(nf);
    for _ in 0..nf {
        faces.push([r.u32()?, r.u32()?, r.u32()?]);
    }
    if r.remaining() != 0 {
        return Err(FormatError::Inconsistent(format!("{} trailing bytes", r.remaining())));
    }
    Ok(IcoMesh { level, vertices, faces })
}

pub fn write_mesh(mesh: &IcoMesh, path: impl AsRef<Path>) -> Result<(), FormatError> {
    fs::write(path, encode_mesh(mesh))?;
    Ok(())
}

pub fn read_mesh(path: impl AsRef<Path>) -> Result<IcoMesh, FormatError> {
    decode_mesh(&fs::read(path)?)
}
