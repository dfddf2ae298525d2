//! Population-dynamics pool for the stationary forward-message distribution.
//!
//! On the infinite tree the forward messages satisfy the distributional
//! fixed-point equation
//!
//! ```text
//! Gamma  =d=  (U - z - Gamma_1 - ... - Gamma_K)^{-1}
//! ```
//!
//! with `Gamma_1, ..., Gamma_K` independent copies of `Gamma` and `U` an
//! independent potential draw.  A [`GammaPool`] holds a large sample of
//! blocks and evolves it by synchronous resampling: each new member inverts
//! `U - z - sum of K uniformly drawn old members` with a fresh potential.
//! After burn-in the pool approximates the stationary distribution and
//! serves as the boundary-condition reservoir for the Lyapunov and moment
//! estimators.
//!
//! Updates are deterministic functions of `(seed, generation, member index)`,
//! so runs are reproducible and a checkpointed pool resumes bitwise
//! identically.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ensembles::{sample_potential, ModelError, ModelSpec};
use crate::linalg::{
    invert_block, min_hermitian_eigenvalue, skew_part, ComplexBlock, LinalgError,
};
use crate::rng::RngStream;
use crate::tree::{recursion_matrix, SpectralPoint, TreeError};

/// First ladder rung for eta annealing during burn-in.  Near the real axis
/// the fixed-point map contracts only like `1 - O(eta)` per generation, so
/// burn-in walks eta down by decades instead of starting cold.
pub const ANNEAL_START_ETA: f64 = 1.0e-2;

/// Magic first line of a pool checkpoint file.
pub const CHECKPOINT_MAGIC: &str = "BRL-POOL-1";

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("pool must have at least one member")]
    EmptyPool,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint does not start with the {CHECKPOINT_MAGIC} magic line")]
    BadMagic,
    #[error("checkpoint header is not valid: {0}")]
    BadHeader(#[from] serde_json::Error),
    #[error("checkpoint member data is truncated: expected {expected} bytes, got {got}")]
    TruncatedData { expected: usize, got: usize },
    #[error("checkpoint width {header} does not match the model width {model}")]
    WidthMismatch { header: usize, model: usize },
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelSpec,
    e: f64,
    eta_target: f64,
    eta_current: f64,
    generation: u64,
    size: usize,
    width: usize,
}

/// Pool of forward-message blocks evolving under the fixed-point resampling
/// map.
#[derive(Clone, Debug)]
pub struct GammaPool {
    model: ModelSpec,
    e: f64,
    eta_target: f64,
    eta_current: f64,
    generation: u64,
    members: Vec<ComplexBlock>,
}

impl GammaPool {
    /// Pool initialized from leaf messages `(U_i - z)^{-1}` with independent
    /// potentials.
    pub fn new_leaf(
        model: &ModelSpec,
        point: SpectralPoint,
        size: usize,
        base: &RngStream,
    ) -> Result<Self, PoolError> {
        model.validate()?;
        point.require_positive_eta()?;
        if size == 0 {
            return Err(PoolError::EmptyPool);
        }
        let z = point.z();
        let init_stream = base.derive(0);
        let mut members = Vec::with_capacity(size);
        for i in 0..size {
            let mut s = init_stream.derive(i as u64);
            let u = sample_potential(model, &mut s);
            let m = recursion_matrix(&u, z, &[]);
            members.push(invert_block(&m)?);
        }
        Ok(GammaPool {
            model: model.clone(),
            e: point.e,
            eta_target: point.eta,
            eta_current: point.eta,
            generation: 0,
            members,
        })
    }

    /// Pool with every member equal to the given block; useful for seeding
    /// at a known fixed point.
    pub fn from_constant(
        model: &ModelSpec,
        point: SpectralPoint,
        size: usize,
        block: ComplexBlock,
    ) -> Result<Self, PoolError> {
        model.validate()?;
        point.require_positive_eta()?;
        if size == 0 {
            return Err(PoolError::EmptyPool);
        }
        Ok(GammaPool {
            model: model.clone(),
            e: point.e,
            eta_target: point.eta,
            eta_current: point.eta,
            generation: 0,
            members: vec![block; size],
        })
    }

    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    /// Target spectral point the pool is meant to equilibrate at.
    pub fn point(&self) -> SpectralPoint {
        SpectralPoint::new(self.e, self.eta_target)
    }

    /// Eta currently used by update steps (above the target while an
    /// annealing ladder is still descending).
    pub fn eta_current(&self) -> f64 {
        self.eta_current
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn members(&self) -> &[ComplexBlock] {
        &self.members
    }

    fn current_z(&self) -> Complex64 {
        Complex64::new(self.e, self.eta_current)
    }

    /// One synchronous resampling generation.
    ///
    /// Member `i` of generation `g` reads its randomness from
    /// `base.derive(g).derive(i)`, drawing the `K` pool indices first and
    /// the fresh potential second; the update therefore depends only on
    /// `(seed, g, i)` and the previous generation, never on evaluation
    /// order.
    pub fn step(&mut self, base: &RngStream) -> Result<(), PoolError> {
        let z = self.current_z();
        let k = self.model.k;
        let next_gen = self.generation + 1;
        let gen_stream = base.derive(next_gen);
        let mut next = Vec::with_capacity(self.members.len());
        for i in 0..self.members.len() {
            let mut s = gen_stream.derive(i as u64);
            let draws: Vec<usize> =
                (0..k).map(|_| s.index(self.members.len())).collect();
            let u = sample_potential(&self.model, &mut s);
            let subtractions: Vec<&ComplexBlock> =
                draws.iter().map(|&d| &self.members[d]).collect();
            let m = recursion_matrix(&u, z, &subtractions);
            next.push(invert_block(&m)?);
        }
        self.members = next;
        self.generation = next_gen;
        Ok(())
    }

    /// Eta ladder walked during burn-in: decades from
    /// `max(eta_target, ANNEAL_START_ETA)` down to the target.
    pub fn anneal_ladder(&self) -> Vec<f64> {
        let mut rungs = Vec::new();
        let mut eta = self.eta_target.max(ANNEAL_START_ETA);
        loop {
            rungs.push(eta);
            if eta <= self.eta_target * (1.0 + 1.0e-12) {
                break;
            }
            eta = (eta / 10.0).max(self.eta_target);
        }
        rungs
    }

    /// Runs `generations` update steps along the annealing ladder, ending at
    /// the target eta.  Generations are split evenly across rungs with the
    /// remainder given to the final (target) rung.
    pub fn burn_in(
        &mut self,
        base: &RngStream,
        generations: u64,
    ) -> Result<(), PoolError> {
        let rungs = self.anneal_ladder();
        let per_rung = generations / rungs.len() as u64;
        let remainder = generations % rungs.len() as u64;
        for (idx, &eta) in rungs.iter().enumerate() {
            self.eta_current = eta;
            let steps = if idx + 1 == rungs.len() {
                per_rung + remainder
            } else {
                per_rung
            };
            for _ in 0..steps {
                self.step(base)?;
            }
        }
        self.eta_current = self.eta_target;
        Ok(())
    }

    /// Same walk as [`GammaPool::burn_in`], saving a checkpoint to `path`
    /// whenever the generation counter crosses a multiple of `every` and
    /// once more at the end.  The pool state after this call is identical
    /// to a plain `burn_in` with the same arguments.
    pub fn burn_in_checkpointed(
        &mut self,
        base: &RngStream,
        generations: u64,
        every: u64,
        path: &Path,
    ) -> Result<(), PoolError> {
        let rungs = self.anneal_ladder();
        let per_rung = generations / rungs.len() as u64;
        let remainder = generations % rungs.len() as u64;
        for (idx, &eta) in rungs.iter().enumerate() {
            self.eta_current = eta;
            let steps = if idx + 1 == rungs.len() {
                per_rung + remainder
            } else {
                per_rung
            };
            for _ in 0..steps {
                self.step(base)?;
                if every > 0 && self.generation.is_multiple_of(every) {
                    self.save(path)?;
                }
            }
        }
        self.eta_current = self.eta_target;
        self.save(path)?;
        Ok(())
    }

    /// Test hook: forces the working eta, as if an annealing ladder had been
    /// interrupted mid-descent.
    #[cfg(test)]
    pub(crate) fn set_eta_current_for_tests(&mut self, eta: f64) {
        self.eta_current = eta;
    }

    /// Uniform draw from the pool.
    pub fn draw(&self, stream: &mut RngStream) -> &ComplexBlock {
        &self.members[stream.index(self.members.len())]
    }

    /// Smallest eigenvalue of the skew part over all members; stationary
    /// messages are Herglotz, so this must never drop below roundoff.
    pub fn min_skew_eigenvalue(&self) -> f64 {
        self.members
            .iter()
            .map(|m| min_hermitian_eigenvalue(&skew_part(m)))
            .fold(f64::INFINITY, f64::min)
    }

    /// Writes the pool to a checkpoint file: a magic line, a JSON header
    /// line, then raw little-endian `f64` pairs for every member entry.
    pub fn save(&self, path: &Path) -> Result<(), PoolError> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{CHECKPOINT_MAGIC}")?;
        let header = CheckpointHeader {
            model: self.model.clone(),
            e: self.e,
            eta_target: self.eta_target,
            eta_current: self.eta_current,
            generation: self.generation,
            size: self.members.len(),
            width: self.model.w,
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for member in &self.members {
            for value in member.entries() {
                out.write_all(&value.re.to_le_bytes())?;
                out.write_all(&value.im.to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Restores a pool saved by [`GammaPool::save`] bit for bit.
    pub fn load(path: &Path) -> Result<Self, PoolError> {
        let mut reader = BufReader::new(File::open(path)?);
        let mut contents = Vec::new();
        reader.read_to_end(&mut contents)?;
        let magic_end = contents
            .iter()
            .position(|&b| b == b'\n')
            .ok_or(PoolError::BadMagic)?;
        if &contents[..magic_end] != CHECKPOINT_MAGIC.as_bytes() {
            return Err(PoolError::BadMagic);
        }
        let header_start = magic_end + 1;
        let header_end = header_start
            + contents[header_start..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or(PoolError::BadMagic)?;
        let header: CheckpointHeader =
            serde_json::from_slice(&contents[header_start..header_end])?;
        header.model.validate()?;
        if header.width != header.model.w {
            return Err(PoolError::WidthMismatch {
                header: header.width,
                model: header.model.w,
            });
        }
        let w = header.width;
        let data = &contents[header_end + 1..];
        let per_member = w * w * 16;
        let expected = header.size * per_member;
        if data.len() != expected {
            return Err(PoolError::TruncatedData {
                expected,
                got: data.len(),
            });
        }
        let mut members = Vec::with_capacity(header.size);
        for chunk in data.chunks_exact(per_member) {
            let mut entries = Vec::with_capacity(w * w);
            for pair in chunk.chunks_exact(16) {
                let re = f64::from_le_bytes(pair[0..8].try_into().unwrap());
                let im = f64::from_le_bytes(pair[8..16].try_into().unwrap());
                entries.push(Complex64::new(re, im));
            }
            members.push(ComplexBlock::from_entries(w, entries));
        }
        Ok(GammaPool {
            model: header.model,
            e: header.e,
            eta_target: header.eta_target,
            eta_current: header.eta_current,
            generation: header.generation,
            members,
        })
    }
}
