use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::codebook::{nearest_index, Codebook};
use super::rotation::{norm, RowMap};
use crate::diffcore::{CustomOp, Element, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Which backward path the quantizer uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantMode {
    /// Rotation trick: gradients pass through `(‖q‖/‖e‖)·Rᵀ`.
    #[default]
    Rt,
    /// Straight-through estimator: gradients are copied unchanged.
    Ste,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RvqConfig {
    pub codebook_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub commitment_weight: f64,
}

impl Default for RvqConfig {
    fn default() -> Self {
        Self {
            codebook_size: 128,
            dim: 256,
            depth: 4,
            commitment_weight: 0.25,
        }
    }
}

impl RvqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.codebook_size == 0 {
            return Err(Error::EmptyCodebook);
        }
        if self.dim == 0 || self.depth == 0 {
            return Err(Error::invalid("rvq", "dim and depth must be positive"));
        }
        if !(self.commitment_weight >= 0.0) {
            return Err(Error::invalid("rvq", "commitment_weight must be non-negative"));
        }
        Ok(())
    }
}

/// Applies one frozen [`RowMap`] per row; the codebook is never an input.
struct RowMapOp {
    maps: Vec<RowMap>,
}

impl<F: Element> CustomOp<F> for RowMapOp {
    fn name(&self) -> &'static str {
        "row_map"
    }

    fn backward(&self, _inputs: &[&Tensor<F>], output: &Tensor<F>, grad: &[F]) -> Vec<Option<Vec<F>>> {
        let d = output.cols();
        let mut out = Vec::with_capacity(grad.len());
        for (map, g) in self.maps.iter().zip(grad.chunks_exact(d)) {
            let g: Vec<f64> = g.iter().map(|v| v.as_f64()).collect();
            out.extend(map.backward(&g).into_iter().map(F::of));
        }
        vec![Some(out)]
    }
}

/// Result of one quantization layer.
pub struct Quantized {
    pub output: Var,
    pub indices: Vec<usize>,
    pub maps: Vec<RowMap>,
}

fn rows_f64<F: Element>(t: &Tensor<F>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).iter().map(|v| v.as_f64()).collect()).collect()
}

fn check_pair<F: Element>(tape: &Tape<F>, op: &'static str, e: Var, codebook: Var) -> Result<()> {
    let (es, cs) = (tape.shape(e), tape.shape(codebook));
    if es.len() != 2 || cs.len() != 2 || es[1] != cs[1] {
        return Err(Error::shape(op, es, cs));
    }
    if cs[0] == 0 {
        return Err(Error::EmptyCodebook);
    }
    Ok(())
}

fn select<F: Element>(tape: &Tape<F>, e: Var, codebook: Var) -> Result<Vec<usize>> {
    let (et, ct) = (tape.value(e), tape.value(codebook));
    (0..et.rows())
        .map(|t| nearest_index(ct.data(), ct.rows(), ct.cols(), et.row(t)))
        .collect()
}

fn emit<F: Element>(tape: &mut Tape<F>, e: Var, rows: Vec<Vec<f64>>, maps: Vec<RowMap>) -> Result<Var> {
    let shape = tape.shape(e).to_vec();
    let data: Vec<F> = rows.into_iter().flatten().map(F::of).collect();
    let out = Tensor::new(shape, data)?;
    Ok(tape.custom(&[e], out, Box::new(RowMapOp { maps })))
}

fn quantize_with<F: Element>(
    tape: &mut Tape<F>,
    op: &'static str,
    e: Var,
    codebook: Var,
    mode: QuantMode,
) -> Result<Quantized> {
    check_pair(tape, op, e, codebook)?;
    let indices = select(tape, e, codebook)?;
    let er = rows_f64(tape.value(e));
    let ct = tape.value(codebook);
    let qr: Vec<Vec<f64>> = indices
        .iter()
        .map(|&k| ct.row(k).iter().map(|v| v.as_f64()).collect())
        .collect();
    let (maps, out_rows): (Vec<RowMap>, Vec<Vec<f64>>) = match mode {
        QuantMode::Rt => {
            let maps: Vec<RowMap> = er.iter().zip(&qr).map(|(e, q)| RowMap::rotation_trick(e, q)).collect();
            let out = maps.iter().zip(&er).map(|(m, e)| m.forward(e)).collect();
            (maps, out)
        }
        // Emit the code itself so the forward value is exact.
        QuantMode::Ste => (er.iter().zip(&qr).map(|(e, q)| RowMap::straight_through(e, q)).collect(), qr),
    };
    let output = emit(tape, e, out_rows, maps.clone())?;
    Ok(Quantized { output, indices, maps })
}

/// Nearest-code quantization with rotation-trick gradients. Rows whose norm
/// (or whose code's norm) is degenerate fall back to straight-through.
pub fn quantize_rt<F: Element>(tape: &mut Tape<F>, e: Var, codebook: Var) -> Result<Quantized> {
    quantize_with(tape, "quantize_rt", e, codebook, QuantMode::Rt)
}

/// Nearest-code quantization with identity (straight-through) gradients.
pub fn quantize_ste<F: Element>(tape: &mut Tape<F>, e: Var, codebook: Var) -> Result<Quantized> {
    quantize_with(tape, "quantize_ste", e, codebook, QuantMode::Ste)
}

/// Re-applies maps captured at an earlier evaluation point. The result is a
/// smooth function of `e`, which is what finite-difference checks need.
pub fn quantize_frozen<F: Element>(tape: &mut Tape<F>, e: Var, maps: &[RowMap]) -> Result<Var> {
    let er = rows_f64(tape.value(e));
    if er.len() != maps.len() {
        return Err(Error::invalid(
            "quantize_frozen",
            format!("{} rows but {} frozen maps", er.len(), maps.len()),
        ));
    }
    let rows = maps.iter().zip(&er).map(|(m, e)| m.forward(e)).collect();
    emit(tape, e, rows, maps.to_vec())
}

/// Indices and per-row maps of every layer of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct RvqTrace {
    pub indices: Vec<Vec<usize>>,
    pub maps: Vec<Vec<RowMap>>,
}

pub struct QuantizeOutput {
    pub quantized: Var,
    /// `indices[t][l]`.
    pub indices: Vec<Vec<usize>>,
    /// Mean row norm of the residual entering each layer, plus the final
    /// residual (`depth + 1` entries).
    pub residual_norms: Vec<f64>,
    /// Unweighted; [`rvq_loss`] applies `commitment_weight`.
    pub commitment_loss: Var,
    pub codebook_loss: Var,
    pub commitment_weight: f64,
    pub trace: RvqTrace,
}

fn mean_row_norm<F: Element>(t: &Tensor<F>) -> f64 {
    let rows = rows_f64(t);
    rows.iter().map(|r| norm(r)).sum::<f64>() / rows.len().max(1) as f64
}

/// Residual vector quantization over `codebooks`, one per layer.
///
/// Layer `l` quantizes `rˡ`; the next residual subtracts the selected code
/// with gradients stopped, so each layer's output contributes its own
/// gradient path back to `e`. With `frozen`, indices and maps come from an
/// earlier trace instead of a fresh nearest-code search.
pub fn rvq_forward<F: Element>(
    tape: &mut Tape<F>,
    codebooks: &[Var],
    e: Var,
    mode: QuantMode,
    commitment_weight: f64,
    frozen: Option<&RvqTrace>,
) -> Result<QuantizeOutput> {
    if codebooks.is_empty() {
        return Err(Error::invalid("rvq_forward", "no codebook layers"));
    }
    let t_rows = tape.shape(e).first().copied().unwrap_or(0);
    if t_rows == 0 {
        return Err(Error::invalid("rvq_forward", "no frames to quantize"));
    }
    if let Some(tr) = frozen {
        if tr.maps.len() != codebooks.len() {
            return Err(Error::invalid("rvq_forward", "frozen trace depth differs from stack"));
        }
    }
    let mut residual = e;
    let mut quantized: Option<Var> = None;
    let mut commitment: Option<Var> = None;
    let mut codebook_loss: Option<Var> = None;
    let mut trace = RvqTrace {
        indices: Vec::new(),
        maps: Vec::new(),
    };
    let mut residual_norms = vec![mean_row_norm(tape.value(e))];

    for (l, &cb) in codebooks.iter().enumerate() {
        check_pair(tape, "rvq_forward", residual, cb)?;
        let layer = match frozen {
            Some(tr) => {
                let output = quantize_frozen(tape, residual, &tr.maps[l])?;
                Quantized {
                    output,
                    indices: tr.indices[l].clone(),
                    maps: tr.maps[l].clone(),
                }
            }
            None => match mode {
                QuantMode::Rt => quantize_rt(tape, residual, cb)?,
                QuantMode::Ste => quantize_ste(tape, residual, cb)?,
            },
        };
        let q = tape.gather_rows(cb, &layer.indices)?;
        let q_sg = tape.detach(q);
        let r_sg = tape.detach(residual);

        let diff = tape.sub(residual, q_sg)?;
        let sq = tape.square(diff);
        let commit = tape.mean(sq);
        let diff = tape.sub(r_sg, q)?;
        let sq = tape.square(diff);
        let cbl = tape.mean(sq);

        commitment = Some(match commitment {
            Some(acc) => tape.add(acc, commit)?,
            None => commit,
        });
        codebook_loss = Some(match codebook_loss {
            Some(acc) => tape.add(acc, cbl)?,
            None => cbl,
        });
        quantized = Some(match quantized {
            Some(acc) => tape.add(acc, layer.output)?,
            None => layer.output,
        });

        residual = tape.sub(residual, q_sg)?;
        residual_norms.push(mean_row_norm(tape.value(residual)));
        trace.indices.push(layer.indices);
        trace.maps.push(layer.maps);
    }

    let indices = (0..t_rows)
        .map(|t| trace.indices.iter().map(|layer| layer[t]).collect())
        .collect();
    Ok(QuantizeOutput {
        quantized: quantized.expect("at least one layer"),
        indices,
        residual_norms,
        commitment_loss: commitment.expect("at least one layer"),
        codebook_loss: codebook_loss.expect("at least one layer"),
        commitment_weight,
        trace,
    })
}

/// `codebook_loss + commitment_weight · commitment_loss`.
pub fn rvq_loss<F: Element>(tape: &mut Tape<F>, out: &QuantizeOutput) -> Result<Var> {
    let weighted = tape.scale(out.commitment_loss, out.commitment_weight);
    tape.add(out.codebook_loss, weighted)
}

/// Fraction of the `size` codes of layer `layer` that appear in `indices`.
pub fn utilization(indices: &[Vec<usize>], layer: usize, size: usize) -> f64 {
    let mut seen = vec![false; size];
    for row in indices {
        if let Some(&k) = row.get(layer) {
            if k < size {
                seen[k] = true;
            }
        }
    }
    seen.iter().filter(|&&s| s).count() as f64 / size.max(1) as f64
}

/// A depth-`L` stack whose codebooks live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct RvqStack {
    pub config: RvqConfig,
    layers: Vec<ParamId>,
}

impl RvqStack {
    /// Registers `depth` randomly initialised codebooks as `{prefix}.{l}`.
    pub fn new<R: Rng>(config: RvqConfig, store: &mut ParamStore<f32>, prefix: &str, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let layers = (0..config.depth)
            .map(|l| {
                let cb: Codebook<f32> = Codebook::random(config.codebook_size, config.dim, rng)?;
                store.add(format!("{prefix}.{l}"), cb.into_tensor())
            })
            .collect::<Result<_>>()?;
        Ok(Self { config, layers })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn param_ids(&self) -> &[ParamId] {
        &self.layers
    }

    pub fn codebooks<F: Element>(&self, store: &ParamStore<F>) -> Result<Vec<Codebook<F>>> {
        self.layers.iter().map(|&id| Codebook::new(store.get(id).clone())).collect()
    }

    /// Runs [`rvq_forward`] on codebooks already bound to `tape`.
    pub fn forward<F: Element>(
        &self,
        tape: &mut Tape<F>,
        e: Var,
        mode: QuantMode,
        frozen: Option<&RvqTrace>,
    ) -> Result<QuantizeOutput> {
        let cbs: Vec<Var> = self.layers.iter().map(|&id| tape.param(id)).collect();
        rvq_forward(tape, &cbs, e, mode, self.config.commitment_weight, frozen)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CodebookManifest {
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "D")]
    d: usize,
    depth: usize,
    commitment_weight: f64,
}

const MANIFEST: &str = "codebooks.json";
const BLOCKS: &str = "codebooks.spt";

/// Writes `codebooks.json` and the concatenated `SPT1` blocks into `dir`.
pub fn save_codebooks(dir: impl AsRef<Path>, codebooks: &[Codebook<f32>], commitment_weight: f64) -> Result<()> {
    let dir = dir.as_ref();
    let first = codebooks
        .first()
        .ok_or_else(|| Error::invalid("save_codebooks", "no layers"))?;
    let (k, d) = (first.size(), first.dim());
    if codebooks.iter().any(|c| c.size() != k || c.dim() != d) {
        return Err(Error::invalid("save_codebooks", "layers differ in shape"));
    }
    std::fs::create_dir_all(dir)?;
    let manifest = CodebookManifest {
        k,
        d,
        depth: codebooks.len(),
        commitment_weight,
    };
    std::fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    let mut w = BufWriter::new(File::create(dir.join(BLOCKS))?);
    for cb in codebooks {
        cb.codes().write_spt(&mut w)?;
    }
    w.flush()?;
    Ok(())
}

/// Inverse of [`save_codebooks`]; returns the layers and commitment weight.
pub fn load_codebooks(dir: impl AsRef<Path>) -> Result<(Vec<Codebook<f32>>, f64)> {
    let dir = dir.as_ref();
    let mpath = dir.join(MANIFEST);
    if !mpath.exists() {
        return Err(Error::MissingFile(mpath));
    }
    let manifest: CodebookManifest = serde_json::from_reader(BufReader::new(File::open(&mpath)?))?;
    let mut r = BufReader::new(File::open(dir.join(BLOCKS))?);
    let mut layers = Vec::with_capacity(manifest.depth);
    for _ in 0..manifest.depth {
        let t = Tensor::read_spt(&mut r)?;
        if t.shape() != [manifest.k, manifest.d] {
            return Err(Error::Format {
                kind: "codebook checkpoint",
                msg: format!("block shape {:?} disagrees with manifest", t.shape()),
            });
        }
        layers.push(Codebook::new(t)?);
    }
    Ok((layers, manifest.commitment_weight))
}
