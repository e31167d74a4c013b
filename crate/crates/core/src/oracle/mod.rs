//! Behavioral equivalence checking.
//!
//! Two kernels are compared by running both on the same inputs and requiring
//! identical output arrays. The vector set is a fixed battery of corner
//! cases (zeros, all-ones, single-hot elements) plus seeded random draws, so
//! a reported verdict is reproducible from its seed.

pub mod interp;
pub mod unroll;

pub use interp::{eval, eval_straight_line, EvalError, InputVector, Outputs};
pub use unroll::{unroll, UnrollError};

use crate::ir::{Direction, Param, ParamKind, StructuredProgram};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EquivConfig {
    /// Random vectors drawn on top of the corner battery.
    pub n_vectors: usize,
    pub seed: u64,
}

impl Default for EquivConfig {
    fn default() -> Self {
        EquivConfig { n_vectors: 1000, seed: 0 }
    }
}

/// Outcome of an equivalence check. A failure carries the exact input that
/// separated the two programs and where the outputs differed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum EquivVerdict {
    Equivalent {
        vectors_tested: usize,
        seed: u64,
    },
    NotEquivalent {
        counterexample: InputVector,
        location: String,
        expected: u128,
        found: u128,
        seed: u64,
    },
}

impl EquivVerdict {
    pub fn is_equivalent(&self) -> bool {
        matches!(self, EquivVerdict::Equivalent { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EquivError {
    #[error("signatures differ: {0}")]
    SignatureMismatch(String),
    #[error("evaluation failed: {0}")]
    Eval(#[from] EvalError),
}

fn signature_diff(a: &[Param], b: &[Param]) -> Option<String> {
    if a.len() != b.len() {
        return Some(format!("{} parameters vs {}", a.len(), b.len()));
    }
    for (pa, pb) in a.iter().zip(b) {
        if pa != pb {
            return Some(format!("parameter `{}` vs `{}`", pa.name, pb.name));
        }
    }
    None
}

/// Deterministic corner battery: all zeros, all ones, broadcast small and
/// high-bit values, and one single-hot vector per input element.
pub fn corner_vectors(params: &[Param]) -> Vec<InputVector> {
    let ins: Vec<&Param> = params
        .iter()
        .filter(|p| p.dir == Direction::In && matches!(p.kind, ParamKind::Array { .. }))
        .collect();
    let scalars: Vec<&Param> =
        params.iter().filter(|p| matches!(p.kind, ParamKind::Scalar { .. })).collect();

    let broadcast = |f: &dyn Fn(crate::ir::ScalarType) -> u128, s: &dyn Fn(u128) -> u128| {
        let mut v = InputVector::default();
        for p in &ins {
            if let ParamKind::Array { elem, len } = p.kind {
                v.arrays.insert(p.name.clone(), vec![f(elem); len]);
            }
        }
        for p in &scalars {
            if let ParamKind::Scalar { max, .. } = p.kind {
                v.scalars.insert(p.name.clone(), s(max));
            }
        }
        v
    };

    let mut out = vec![
        broadcast(&|_| 0, &|_| 0),
        broadcast(&|t| t.mask(), &|m| m),
        broadcast(&|_| 1, &|m| 1.min(m)),
        broadcast(&|t| 1 << (t.bits() - 1), &|m| m / 2),
    ];
    for p in &ins {
        if let ParamKind::Array { elem, len } = p.kind {
            for i in 0..len {
                let mut v = broadcast(&|_| 0, &|m| m);
                v.arrays.get_mut(&p.name).unwrap()[i] = elem.mask();
                out.push(v);
            }
        }
    }
    out
}

/// `n` seeded random vectors; scalar parameters draw uniformly up to their
/// declared maximum.
pub fn random_vectors(params: &[Param], n: usize, seed: u64) -> Vec<InputVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut v = InputVector::default();
            for p in params {
                match p.kind {
                    ParamKind::Array { elem, len } if p.dir == Direction::In => {
                        let data = (0..len).map(|_| rng.gen::<u128>() & elem.mask()).collect();
                        v.arrays.insert(p.name.clone(), data);
                    }
                    ParamKind::Scalar { max, .. } => {
                        let val = if max == u128::MAX { rng.gen() } else { rng.gen_range(0..=max) };
                        v.scalars.insert(p.name.clone(), val);
                    }
                    _ => {}
                }
            }
            v
        })
        .collect()
}

fn first_mismatch(
    expected: &interp::Outputs,
    found: &interp::Outputs,
) -> Option<(String, u128, u128)> {
    for (name, want) in &expected.arrays {
        let got = &found.arrays[name];
        for (i, (w, g)) in want.iter().zip(got).enumerate() {
            if w != g {
                return Some((format!("{name}[{i}]"), *w, *g));
            }
        }
    }
    None
}

/// Checks `candidate` against `reference` over the corner battery plus
/// `cfg.n_vectors` random draws. Signatures must match exactly.
pub fn check_equiv(
    reference: &StructuredProgram,
    candidate: &StructuredProgram,
    cfg: &EquivConfig,
) -> Result<EquivVerdict, EquivError> {
    if let Some(diff) = signature_diff(&reference.params, &candidate.params) {
        return Err(EquivError::SignatureMismatch(diff));
    }
    let mut vectors = corner_vectors(&reference.params);
    vectors.extend(random_vectors(&reference.params, cfg.n_vectors, cfg.seed));
    let total = vectors.len();
    for input in vectors {
        let want = interp::eval(reference, &input)?;
        let got = interp::eval(candidate, &input)?;
        if let Some((location, expected, found)) = first_mismatch(&want, &got) {
            return Ok(EquivVerdict::NotEquivalent {
                counterexample: input,
                location,
                expected,
                found,
                seed: cfg.seed,
            });
        }
    }
    Ok(EquivVerdict::Equivalent { vectors_tested: total, seed: cfg.seed })
}

/// Convenience wrapper for straight-line vs structured comparisons.
pub fn check_equiv_flat(
    reference: &crate::ir::Program,
    candidate: &StructuredProgram,
    cfg: &EquivConfig,
) -> Result<EquivVerdict, EquivError> {
    check_equiv(&StructuredProgram::from(reference.clone()), candidate, cfg)
}

/// Evaluates a program over a named input map given as `(name, values)`
/// pairs; mainly for tests and the CLI.
pub fn input_from_pairs(
    arrays: &[(&str, Vec<u128>)],
    scalars: &[(&str, u128)],
) -> InputVector {
    InputVector {
        arrays: arrays.iter().map(|(n, v)| (n.to_string(), v.clone())).collect(),
        scalars: scalars.iter().map(|(n, v)| (n.to_string(), *v)).collect::<BTreeMap<_, _>>(),
    }
}
