//! Green-function recursions on finite rooted `(K, W)` trees.
//!
//! Vertices of the depth-`n` tree are indexed level by level (root first);
//! every vertex has `K` children until the leaf level.  For a spectral
//! parameter `z = E + i eta` with `eta > 0`, the recursions computed here are
//! exact identities of the resolvent `G = (H - z)^{-1}`:
//!
//! * forward message: `Gamma(y) = (U(y) - z - sum_children Gamma(c))^{-1}`,
//!   the diagonal Green block of the subtree below `y`;
//! * backward message: `GammaHat(x) = (U(p) - z - GammaHat(p)
//!   - sum_{s sibling of x} Gamma(s))^{-1}` for `p` the parent of `x`, the
//!   diagonal Green block at `p` of the tree with `x` (and its subtree)
//!   removed;
//! * full diagonal: `G(x,x) = (U(x) - z - GammaHat(x)
//!   - sum_children Gamma(c))^{-1}`;
//! * path factorization: `G(0,x) = G(0,0) Gamma(x_1) ... Gamma(x_m)` along
//!   the root-to-`x` path.
//!
//! Every recursion output can be cross-checked against
//! [`dense_resolvent_oracle`], which assembles the full `(W V) x (W V)`
//! matrix `H - z` and inverts it directly.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ensembles::{sample_potential, ModelError, ModelSpec};
use crate::linalg::{
    invert_block, w_max_vector, ComplexBlock, LinalgError, RealSymBlock,
};
use crate::rng::RngStream;

/// Hard cap on tree size; guards against runaway depth requests.
pub const MAX_TREE_VERTICES: usize = 1 << 22;

/// Hard cap on the dense-oracle matrix dimension `W * V`.
pub const MAX_DENSE_DIM: usize = 5000;

/// Residual threshold for the dense oracle; the inversion fails loudly if
/// `||(H - z) G - I||_F` exceeds this.
pub const DENSE_ORACLE_RESIDUAL_TOLERANCE: f64 = 1.0e-10;

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("tree with branching {k} and depth {depth} exceeds the vertex budget {max}")]
    DepthTooLarge { k: usize, depth: usize, max: usize },
    #[error("level {level} exceeds tree depth {depth}")]
    InvalidLevel { level: usize, depth: usize },
    #[error("vertex {vertex} out of range for a tree with {count} vertices")]
    VertexOutOfRange { vertex: usize, count: usize },
    #[error("spectral parameter must have eta > 0 for recursions, got eta = {eta}")]
    NonPositiveEta { eta: f64 },
    #[error("the root vertex has no parent")]
    RootHasNoParent,
    #[error("vertex {ancestor} is not a proper ancestor of vertex {vertex}")]
    NotAncestor { ancestor: usize, vertex: usize },
    #[error("dense matrix dimension {dim} exceeds the budget {max}")]
    DimensionTooLarge { dim: usize, max: usize },
    #[error("dense resolvent residual {residual:.3e} exceeds tolerance {tolerance:.3e}")]
    ResidualTooLarge { residual: f64, tolerance: f64 },
    #[error("vertex {vertex} was removed from the graph")]
    RemovedVertex { vertex: usize },
    #[error("wrong number of potentials: expected {expected}, got {got}")]
    PotentialCountMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Point `z = E + i eta` in the closed upper half plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralPoint {
    pub e: f64,
    pub eta: f64,
}

impl SpectralPoint {
    pub fn new(e: f64, eta: f64) -> Self {
        SpectralPoint { e, eta }
    }

    pub fn z(&self) -> Complex64 {
        Complex64::new(self.e, self.eta)
    }

    pub fn require_positive_eta(&self) -> Result<(), TreeError> {
        if self.eta > 0.0 && self.eta.is_finite() {
            Ok(())
        } else {
            Err(TreeError::NonPositiveEta { eta: self.eta })
        }
    }
}

/// Rooted tree with branching number `K` and the given depth, vertices laid
/// out level by level.
#[derive(Clone, Debug, PartialEq)]
pub struct TreeGeometry {
    k: usize,
    depth: usize,
    /// `level_offsets[l]` is the index of the first vertex at depth `l`;
    /// the final entry is the total vertex count.
    level_offsets: Vec<usize>,
}

impl TreeGeometry {
    pub fn new(k: usize, depth: usize) -> Result<Self, TreeError> {
        assert!(k >= 1, "branching number must be positive");
        let mut level_offsets = Vec::with_capacity(depth + 2);
        level_offsets.push(0);
        let mut level_size = 1usize;
        let mut total = 0usize;
        for _ in 0..=depth {
            total = total
                .checked_add(level_size)
                .filter(|t| *t <= MAX_TREE_VERTICES)
                .ok_or(TreeError::DepthTooLarge {
                    k,
                    depth,
                    max: MAX_TREE_VERTICES,
                })?;
            level_offsets.push(total);
            level_size = level_size.checked_mul(k).ok_or(TreeError::DepthTooLarge {
                k,
                depth,
                max: MAX_TREE_VERTICES,
            })?;
        }
        Ok(TreeGeometry {
            k,
            depth,
            level_offsets,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn vertex_count(&self) -> usize {
        *self.level_offsets.last().unwrap()
    }

    pub fn check_vertex(&self, v: usize) -> Result<(), TreeError> {
        if v < self.vertex_count() {
            Ok(())
        } else {
            Err(TreeError::VertexOutOfRange {
                vertex: v,
                count: self.vertex_count(),
            })
        }
    }

    /// Depth of vertex `v`.
    pub fn level_of(&self, v: usize) -> usize {
        debug_assert!(v < self.vertex_count());
        // level_offsets is sorted; find the level whose range contains v.
        match self.level_offsets.binary_search(&v) {
            Ok(l) => l,
            Err(l) => l - 1,
        }
    }

    pub fn parent(&self, v: usize) -> Option<usize> {
        if v == 0 {
            return None;
        }
        let l = self.level_of(v);
        let pos = v - self.level_offsets[l];
        Some(self.level_offsets[l - 1] + pos / self.k)
    }

    /// Child range of `v` (empty for leaves).
    pub fn children(&self, v: usize) -> std::ops::Range<usize> {
        let l = self.level_of(v);
        if l == self.depth {
            return 0..0;
        }
        let pos = v - self.level_offsets[l];
        let start = self.level_offsets[l + 1] + pos * self.k;
        start..(start + self.k)
    }

    /// Vertex range of the sphere at the given depth.
    pub fn sphere(&self, level: usize) -> Result<std::ops::Range<usize>, TreeError> {
        if level > self.depth {
            return Err(TreeError::InvalidLevel {
                level,
                depth: self.depth,
            });
        }
        Ok(self.level_offsets[level]..self.level_offsets[level + 1])
    }

    /// Path word of `v`: child indices taken from the root.
    pub fn path_of(&self, v: usize) -> Vec<u32> {
        let mut path = Vec::with_capacity(self.level_of(v));
        let mut cur = v;
        while let Some(p) = self.parent(cur) {
            let child_index = cur - self.children(p).start;
            path.push(child_index as u32);
            cur = p;
        }
        path.reverse();
        path
    }

    /// Vertices on the path from the root to `v`, inclusive.
    pub fn path_vertices(&self, v: usize) -> Vec<usize> {
        let mut path = vec![v];
        let mut cur = v;
        while let Some(p) = self.parent(cur) {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }
}

/// Per-vertex potentials `U(x) = A + lambda V(x)`, sampled from streams
/// addressed by the vertex path words; the result is independent of the
/// enumeration order.
pub fn sample_tree_potentials(
    model: &ModelSpec,
    geom: &TreeGeometry,
    stream: &RngStream,
) -> Vec<RealSymBlock> {
    (0..geom.vertex_count())
        .map(|v| {
            let mut s = stream.for_path(&geom.path_of(v));
            sample_potential(model, &mut s)
        })
        .collect()
}

fn check_potentials(
    geom: &TreeGeometry,
    potentials: &[RealSymBlock],
) -> Result<(), TreeError> {
    if potentials.len() != geom.vertex_count() {
        return Err(TreeError::PotentialCountMismatch {
            expected: geom.vertex_count(),
            got: potentials.len(),
        });
    }
    Ok(())
}

/// `U - z - sum` as a complex block, the matrix inverted at every recursion
/// step.
pub(crate) fn recursion_matrix(
    u: &RealSymBlock,
    z: Complex64,
    subtractions: &[&ComplexBlock],
) -> ComplexBlock {
    let w = u.dim();
    let mut m = u.to_complex();
    for i in 0..w {
        m.set(i, i, m.at(i, i) - z);
    }
    for s in subtractions {
        for i in 0..w {
            for j in 0..w {
                m.set(i, j, m.at(i, j) - s.at(i, j));
            }
        }
    }
    m
}

/// Forward messages for every vertex, processed leaves first.
pub fn forward_pass(
    geom: &TreeGeometry,
    potentials: &[RealSymBlock],
    point: SpectralPoint,
) -> Result<Vec<ComplexBlock>, TreeError> {
    point.require_positive_eta()?;
    check_potentials(geom, potentials)?;
    let z = point.z();
    let count = geom.vertex_count();
    let mut gamma: Vec<ComplexBlock> = vec![ComplexBlock::zeros(0); count];
    for v in (0..count).rev() {
        let children = geom.children(v);
        let subtractions: Vec<&ComplexBlock> = children.map(|c| &gamma[c]).collect();
        let m = recursion_matrix(&potentials[v], z, &subtractions);
        gamma[v] = invert_block(&m)?;
    }
    Ok(gamma)
}

/// Backward messages (`GammaHat`) and full diagonal blocks for every vertex.
///
/// `gamma_hat[0]` is a zero placeholder: the root has no parent side.
pub fn backward_pass(
    geom: &TreeGeometry,
    potentials: &[RealSymBlock],
    point: SpectralPoint,
    gamma: &[ComplexBlock],
) -> Result<(Vec<ComplexBlock>, Vec<ComplexBlock>), TreeError> {
    point.require_positive_eta()?;
    check_potentials(geom, potentials)?;
    let z = point.z();
    let w = potentials[0].dim();
    let count = geom.vertex_count();
    let mut gamma_hat: Vec<ComplexBlock> = vec![ComplexBlock::zeros(w); count];
    let mut diag: Vec<ComplexBlock> = vec![ComplexBlock::zeros(w); count];
    diag[0] = gamma[0].clone();
    // Level order guarantees the parent's gamma_hat is ready first.
    for p in 0..count {
        let children = geom.children(p);
        if children.is_empty() {
            continue;
        }
        // Shared part: U(p) - z - GammaHat(p) - sum over all children.
        let mut shared = potentials[p].to_complex();
        for i in 0..w {
            shared.set(i, i, shared.at(i, i) - z);
        }
        if p != 0 {
            shared = shared.sub(&gamma_hat[p]);
        }
        for c in children.clone() {
            shared = shared.sub(&gamma[c]);
        }
        for x in children {
            // Add back the on-path child to exclude it from the sibling sum.
            let m = shared.add(&gamma[x]);
            gamma_hat[x] = invert_block(&m)?;
        }
    }
    for x in 1..count {
        let children = geom.children(x);
        let mut subtractions: Vec<&ComplexBlock> = children.map(|c| &gamma[c]).collect();
        subtractions.push(&gamma_hat[x]);
        let m = recursion_matrix(&potentials[x], z, &subtractions);
        diag[x] = invert_block(&m)?;
    }
    Ok((gamma_hat, diag))
}

/// All Green-function data of one sampled tree.
#[derive(Clone, Debug)]
pub struct TreeGreens {
    geom: TreeGeometry,
    point: SpectralPoint,
    potentials: Vec<RealSymBlock>,
    gamma: Vec<ComplexBlock>,
    gamma_hat: Vec<ComplexBlock>,
    diag: Vec<ComplexBlock>,
}

/// Punctured path Green block together with its norm data: the block
/// `G^{T_x}(a, x_-)`, its operator norm, and the top right-singular vector
/// `w_max((G)* G)`.
#[derive(Clone, Debug)]
pub struct PuncturedGreen {
    pub block: ComplexBlock,
    pub norm: f64,
    pub w_vector: Vec<Complex64>,
}

impl TreeGreens {
    /// Samples potentials and runs both passes.
    pub fn build(
        model: &ModelSpec,
        geom: &TreeGeometry,
        point: SpectralPoint,
        stream: &RngStream,
    ) -> Result<Self, TreeError> {
        model.validate()?;
        let potentials = sample_tree_potentials(model, geom, stream);
        TreeGreens::from_potentials(geom.clone(), potentials, point)
    }

    /// Runs both passes on externally supplied potentials.
    pub fn from_potentials(
        geom: TreeGeometry,
        potentials: Vec<RealSymBlock>,
        point: SpectralPoint,
    ) -> Result<Self, TreeError> {
        let gamma = forward_pass(&geom, &potentials, point)?;
        let (gamma_hat, diag) = backward_pass(&geom, &potentials, point, &gamma)?;
        Ok(TreeGreens {
            geom,
            point,
            potentials,
            gamma,
            gamma_hat,
            diag,
        })
    }

    pub fn geometry(&self) -> &TreeGeometry {
        &self.geom
    }

    pub fn point(&self) -> SpectralPoint {
        self.point
    }

    pub fn potentials(&self) -> &[RealSymBlock] {
        &self.potentials
    }

    /// Forward message `Gamma(x) = G^{T_{x_-}}(x, x)` (for the root: `G(0,0)`).
    pub fn gamma(&self, x: usize) -> &ComplexBlock {
        &self.gamma[x]
    }

    /// Backward message `GammaHat(x) = G^{T_x}(x_-, x_-)`; only defined for
    /// non-root vertices.
    pub fn gamma_hat(&self, x: usize) -> Result<&ComplexBlock, TreeError> {
        if x == 0 {
            return Err(TreeError::RootHasNoParent);
        }
        self.geom.check_vertex(x)?;
        Ok(&self.gamma_hat[x])
    }

    /// Full-tree diagonal block `G(x, x)`.
    pub fn diagonal(&self, x: usize) -> &ComplexBlock {
        &self.diag[x]
    }

    /// Full-tree path block
    /// `G(0, x) = G(0,0) (-Gamma(x_1)) ... (-Gamma(x_m))`;
    /// every hop contributes `-Gamma` because the hopping blocks of `H` are
    /// `+1`, so the unsigned message product recovers `G(0,x)` only up to
    /// the parity `(-1)^m` of the path length.
    pub fn path_green(&self, x: usize) -> Result<ComplexBlock, TreeError> {
        self.geom.check_vertex(x)?;
        let path = self.geom.path_vertices(x);
        let mut product = self.gamma[0].clone();
        for &v in &path[1..] {
            product = product.mul(&self.gamma[v]);
        }
        if (path.len() - 1) % 2 == 1 {
            product = product.scale(Complex64::new(-1.0, 0.0));
        }
        Ok(product)
    }

    /// Punctured path block `G^{T_x}(a, x_-)` inside the subtree rooted at
    /// `a`, where `T_x` removes `x` (and with it everything below `x`).
    ///
    /// `a` must be a proper ancestor of `x`.  For `a = 0` this is the full
    /// punctured block `G^{T_x}(0, x_-)`.
    pub fn punctured_path_green_from(
        &self,
        a: usize,
        x: usize,
    ) -> Result<PuncturedGreen, TreeError> {
        self.geom.check_vertex(x)?;
        self.geom.check_vertex(a)?;
        if x == 0 {
            return Err(TreeError::RootHasNoParent);
        }
        let path = self.geom.path_vertices(x);
        let a_pos = match path.iter().position(|&v| v == a) {
            Some(p) if p + 1 < path.len() => p,
            _ => {
                return Err(TreeError::NotAncestor {
                    ancestor: a,
                    vertex: x,
                })
            }
        };
        let z = self.point.z();
        // Path a = y_0, y_1, ..., y_m = x below a.
        let below: &[usize] = &path[a_pos..];
        let m = below.len() - 1;
        let modified = self.punctured_chain(below)?;
        // Root factor of the punctured subtree at a.
        let excluded = below[1];
        let mut subtractions: Vec<&ComplexBlock> = self
            .geom
            .children(a)
            .filter(|c| *c != excluded)
            .map(|c| &self.gamma[c])
            .collect();
        // The component of a never includes a parent side: either a is the
        // root, or puncturing detached the subtree of a from everything
        // above it.  Nothing else to subtract.
        if let Some(first) = modified.first() {
            subtractions.push(first);
        }
        let mat = recursion_matrix(&self.potentials[a], z, &subtractions);
        let root_factor = invert_block(&mat)?;
        let mut block = root_factor;
        for factor in &modified {
            block = block.mul(factor);
        }
        // Same hop-sign convention as path_green: the path a -> x_- has
        // m - 1 edges.
        if (m - 1) % 2 == 1 {
            block = block.scale(Complex64::new(-1.0, 0.0));
        }
        let gram = block.adjoint().mul(&block);
        let (lambda, w_vector) = w_max_vector(&gram)?;
        Ok(PuncturedGreen {
            norm: lambda.max(0.0).sqrt(),
            block,
            w_vector,
        })
    }

    /// Full punctured block `G^{T_x}(0, x_-)` from the root.
    pub fn punctured_path_green(&self, x: usize) -> Result<PuncturedGreen, TreeError> {
        self.punctured_path_green_from(0, x)
    }

    /// Modified forward messages along the punctured path.  For `below =
    /// [y_0, y_1, ..., y_m]` (with `y_m` the removed vertex), returns the
    /// messages of `y_1 ... y_{m-1}` in the tree without the subtree of
    /// `y_m`, ordered shallow to deep: for the parent of the removed vertex
    /// the on-path child is simply missing; higher up, the on-path forward
    /// message is replaced by its modified version.
    fn punctured_chain(&self, below: &[usize]) -> Result<Vec<ComplexBlock>, TreeError> {
        let z = self.point.z();
        let m = below.len() - 1;
        let mut modified: Vec<ComplexBlock> = Vec::with_capacity(m.saturating_sub(1));
        let mut on_path: Option<ComplexBlock> = None;
        for j in (1..m).rev() {
            let y = below[j];
            let excluded = below[j + 1];
            let mut subtractions: Vec<&ComplexBlock> = self
                .geom
                .children(y)
                .filter(|c| *c != excluded)
                .map(|c| &self.gamma[c])
                .collect();
            if let Some(prev) = on_path.as_ref() {
                subtractions.push(prev);
            }
            let mat = recursion_matrix(&self.potentials[y], z, &subtractions);
            let inv = invert_block(&mat)?;
            modified.push(inv.clone());
            on_path = Some(inv);
        }
        modified.reverse();
        Ok(modified)
    }

    /// Diagonal Green block `G^{T_x}(u, u)` at a proper ancestor `u` of `x`
    /// in the tree with the subtree of `x` removed.
    ///
    /// Everything above and beside `u` is unaffected by the puncture, so the
    /// parent-side message stays `GammaHat(u)` and only the on-path child
    /// message is replaced by its modified version (or dropped entirely when
    /// the on-path child is `x` itself).
    pub fn punctured_diagonal(&self, u: usize, x: usize) -> Result<ComplexBlock, TreeError> {
        self.geom.check_vertex(u)?;
        self.geom.check_vertex(x)?;
        if x == 0 {
            return Err(TreeError::RootHasNoParent);
        }
        let path = self.geom.path_vertices(x);
        let u_pos = match path.iter().position(|&v| v == u) {
            Some(p) if p + 1 < path.len() => p,
            _ => {
                return Err(TreeError::NotAncestor {
                    ancestor: u,
                    vertex: x,
                })
            }
        };
        let below = &path[u_pos..];
        let modified = self.punctured_chain(below)?;
        let excluded = below[1];
        let mut subtractions: Vec<&ComplexBlock> = self
            .geom
            .children(u)
            .filter(|c| *c != excluded)
            .map(|c| &self.gamma[c])
            .collect();
        if let Some(first) = modified.first() {
            subtractions.push(first);
        }
        if u != 0 {
            subtractions.push(&self.gamma_hat[u]);
        }
        let mat = recursion_matrix(&self.potentials[u], self.point.z(), &subtractions);
        Ok(invert_block(&mat)?)
    }
}

/// Dense resolvent of the full (possibly vertex-punctured) tree operator.
pub struct DenseResolvent {
    w: usize,
    slots: Vec<Option<usize>>,
    entries: ComplexBlock,
}

/// Assembles `H - z` over the kept vertices and inverts it directly.
///
/// `removed` lists vertices deleted from the graph (their rows and columns
/// are dropped entirely).  Fails if the dimension exceeds [`MAX_DENSE_DIM`]
/// or if the inversion residual is above
/// [`DENSE_ORACLE_RESIDUAL_TOLERANCE`].
pub fn dense_resolvent_oracle(
    geom: &TreeGeometry,
    potentials: &[RealSymBlock],
    point: SpectralPoint,
    removed: &[usize],
) -> Result<DenseResolvent, TreeError> {
    point.require_positive_eta()?;
    check_potentials(geom, potentials)?;
    for &r in removed {
        geom.check_vertex(r)?;
    }
    let w = potentials[0].dim();
    let count = geom.vertex_count();
    let mut slots: Vec<Option<usize>> = vec![None; count];
    let mut kept = 0usize;
    for v in 0..count {
        if removed.contains(&v) {
            continue;
        }
        slots[v] = Some(kept);
        kept += 1;
    }
    let dim = kept * w;
    if dim > MAX_DENSE_DIM {
        return Err(TreeError::DimensionTooLarge {
            dim,
            max: MAX_DENSE_DIM,
        });
    }
    let z = point.z();
    let mut h = ComplexBlock::zeros(dim);
    for v in 0..count {
        let Some(sv) = slots[v] else { continue };
        for i in 0..w {
            for j in 0..w {
                let mut entry = Complex64::new(potentials[v].at(i, j), 0.0);
                if i == j {
                    entry -= z;
                }
                h.set(sv * w + i, sv * w + j, entry);
            }
        }
        for c in geom.children(v) {
            let Some(sc) = slots[c] else { continue };
            for i in 0..w {
                h.set(sv * w + i, sc * w + i, Complex64::new(1.0, 0.0));
                h.set(sc * w + i, sv * w + i, Complex64::new(1.0, 0.0));
            }
        }
    }
    let inverse = invert_block(&h)?;
    let residual = h
        .mul(&inverse)
        .sub(&ComplexBlock::identity(dim))
        .frobenius_norm();
    if residual > DENSE_ORACLE_RESIDUAL_TOLERANCE {
        return Err(TreeError::ResidualTooLarge {
            residual,
            tolerance: DENSE_ORACLE_RESIDUAL_TOLERANCE,
        });
    }
    Ok(DenseResolvent {
        w,
        slots,
        entries: inverse,
    })
}

impl DenseResolvent {
    /// The `(x, y)` block of the resolvent.
    pub fn block(&self, x: usize, y: usize) -> Result<ComplexBlock, TreeError> {
        let sx = self
            .slots
            .get(x)
            .copied()
            .ok_or(TreeError::VertexOutOfRange {
                vertex: x,
                count: self.slots.len(),
            })?
            .ok_or(TreeError::RemovedVertex { vertex: x })?;
        let sy = self
            .slots
            .get(y)
            .copied()
            .ok_or(TreeError::VertexOutOfRange {
                vertex: y,
                count: self.slots.len(),
            })?
            .ok_or(TreeError::RemovedVertex { vertex: y })?;
        let mut out = ComplexBlock::zeros(self.w);
        for i in 0..self.w {
            for j in 0..self.w {
                out.set(i, j, self.entries.at(sx * self.w + i, sy * self.w + j));
            }
        }
        Ok(out)
    }
}
