use super::{ContributionScore, ParamGroup, ProbeDims, ProbeParams};
use crate::error::{Error, Result};
use crate::extraction::ExtractedRep;
use crate::par::{self, Parallelism};

// Dense helpers over row-major weight slices.

/// `out = W x + b`.
fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for ((o, row), bias) in out.iter_mut().zip(w.chunks_exact(cols)).zip(b) {
        *o = bias + row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
    }
}

/// `out += W^T y`.
fn add_transposed(w: &[f64], y: &[f64], out: &mut [f64]) {
    let cols = out.len();
    for (row, &yv) in w.chunks_exact(cols).zip(y) {
        if yv != 0.0 {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * yv;
            }
        }
    }
}

/// `g += y x^T`.
fn add_outer(g: &mut [f64], y: &[f64], x: &[f64]) {
    let cols = x.len();
    for (row, &yv) in g.chunks_exact_mut(cols).zip(y) {
        if yv != 0.0 {
            for (gv, xv) in row.iter_mut().zip(x) {
                *gv += yv * xv;
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// The probe's view of a representation: optionally z-normalized over all
/// `L·k·d` entries.
pub fn prepare_input(params: &ProbeParams, rep: &ExtractedRep) -> Result<Vec<f64>> {
    params.dims().check_rep(rep)?;
    let mut x = rep.values.clone();
    if params.normalize() {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        x.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    }
    Ok(x)
}

/// Intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    stamp: u64,
    input: Vec<f64>,
    /// Per layer: fusion output `f`.
    fused: Vec<Vec<f64>>,
    /// Per layer: gate activations `[i, f, g, o]`, `4h`.
    gates: Vec<Vec<f64>>,
    /// Cell states `c_0 .. c_L` (`c_0 = 0`).
    cells: Vec<Vec<f64>>,
    /// Hidden states `h_0 .. h_L` (`h_0 = 0`).
    hiddens: Vec<Vec<f64>>,
    /// Classifier first-layer activation.
    cls_hidden: Vec<f64>,
    pub score: ContributionScore,
}

impl ForwardCache {
    pub fn classifier_hidden(&self) -> &[f64] {
        &self.cls_hidden
    }
}

fn run(params: &ProbeParams, input: Vec<f64>) -> (ForwardCache, Vec<f64>) {
    let d = *params.dims();
    let (f, h) = (d.fusion, d.hidden);
    let fw = params.group(ParamGroup::FusionW);
    let fb = params.group(ParamGroup::FusionB);
    let wx = params.group(ParamGroup::LstmWx);
    let wh = params.group(ParamGroup::LstmWh);
    let lb = params.group(ParamGroup::LstmB);
    let mut fused = Vec::with_capacity(d.layers);
    let mut gates = Vec::with_capacity(d.layers);
    let mut cells = vec![vec![0.0; h]];
    let mut hiddens = vec![vec![0.0; h]];
    let mut z = vec![0.0; 4 * h];
    let mut zh = vec![0.0; 4 * h];
    let zero4h = vec![0.0; 4 * h];
    for x in input.chunks_exact(d.input()) {
        let mut u = vec![0.0; f];
        affine(fw, fb, x, &mut u);
        u.iter_mut().for_each(|v| *v = v.tanh());
        affine(wx, lb, &u, &mut z);
        affine(wh, &zero4h, hiddens.last().unwrap(), &mut zh);
        let mut g = vec![0.0; 4 * h];
        for j in 0..4 * h {
            let pre = z[j] + zh[j];
            g[j] = if (2 * h..3 * h).contains(&j) { pre.tanh() } else { sigmoid(pre) };
        }
        let c_prev = cells.last().unwrap();
        let c: Vec<f64> = (0..h)
            .map(|j| g[h + j] * c_prev[j] + g[j] * g[2 * h + j])
            .collect();
        let hn: Vec<f64> = (0..h).map(|j| g[3 * h + j] * c[j].tanh()).collect();
        fused.push(u);
        gates.push(g);
        cells.push(c);
        hiddens.push(hn);
    }
    let mut r = vec![0.0; d.cls_hidden];
    affine(
        params.group(ParamGroup::ClsW1),
        params.group(ParamGroup::ClsB1),
        hiddens.last().unwrap(),
        &mut r,
    );
    r.iter_mut().for_each(|v| *v = v.tanh());
    let mut logits = vec![0.0; d.classes];
    affine(
        params.group(ParamGroup::ClsW2),
        params.group(ParamGroup::ClsB2),
        &r,
        &mut logits,
    );
    let score = ContributionScore::from_logits(&logits);
    (
        ForwardCache {
            stamp: params.stamp(),
            input,
            fused,
            gates,
            cells,
            hiddens,
            cls_hidden: r,
            score,
        },
        logits,
    )
}

pub fn forward(params: &ProbeParams, rep: &ExtractedRep) -> Result<(ContributionScore, ForwardCache)> {
    let (cache, _) = run(params, prepare_input(params, rep)?);
    Ok((cache.score.clone(), cache))
}

pub fn infer_logits(params: &ProbeParams, rep: &ExtractedRep) -> Result<Vec<f64>> {
    Ok(run(params, prepare_input(params, rep)?).1)
}

pub fn infer(params: &ProbeParams, rep: &ExtractedRep) -> Result<ContributionScore> {
    Ok(ContributionScore::from_logits(&infer_logits(params, rep)?))
}

/// Activation of the classifier's first layer, the feature the filter taps.
pub fn classifier_hidden(params: &ProbeParams, rep: &ExtractedRep) -> Result<Vec<f64>> {
    Ok(run(params, prepare_input(params, rep)?).0.cls_hidden)
}

/// Analytic gradient of the cross-entropy loss for one sample, added into
/// `grad` (same layout as the parameters).
pub fn backward_into(
    params: &ProbeParams,
    cache: &ForwardCache,
    label: usize,
    grad: &mut [f64],
) -> Result<()> {
    let d: ProbeDims = *params.dims();
    if cache.stamp != params.stamp() {
        return Err(Error::Contract(
            "forward cache was produced by different parameters".into(),
        ));
    }
    if label >= d.classes {
        return Err(Error::Label {
            label: label as i64,
            classes: d.classes,
        });
    }
    if grad.len() != d.total() {
        return Err(Error::Dimension("gradient buffer has wrong length".into()));
    }
    let h = d.hidden;
    let range = |g| d.range(g);

    let mut dlogits = cache.score.as_slice().to_vec();
    dlogits[label] -= 1.0;
    let r = &cache.cls_hidden;
    add_outer(&mut grad[range(ParamGroup::ClsW2)], &dlogits, r);
    grad[range(ParamGroup::ClsB2)]
        .iter_mut()
        .zip(&dlogits)
        .for_each(|(g, v)| *g += v);
    let mut dr = vec![0.0; d.cls_hidden];
    add_transposed(params.group(ParamGroup::ClsW2), &dlogits, &mut dr);
    let dq: Vec<f64> = dr.iter().zip(r).map(|(g, a)| g * (1.0 - a * a)).collect();
    let h_last = cache.hiddens.last().unwrap();
    add_outer(&mut grad[range(ParamGroup::ClsW1)], &dq, h_last);
    grad[range(ParamGroup::ClsB1)]
        .iter_mut()
        .zip(&dq)
        .for_each(|(g, v)| *g += v);
    let mut dh = vec![0.0; h];
    add_transposed(params.group(ParamGroup::ClsW1), &dq, &mut dh);

    let mut dc = vec![0.0; h];
    let mut dz = vec![0.0; 4 * h];
    for l in (0..d.layers).rev() {
        let g = &cache.gates[l];
        let c = &cache.cells[l + 1];
        let c_prev = &cache.cells[l];
        for j in 0..h {
            let (ig, fg, gg, og) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
            let tc = c[j].tanh();
            let d_o = dh[j] * tc;
            dc[j] += dh[j] * og * (1.0 - tc * tc);
            let d_i = dc[j] * gg;
            let d_g = dc[j] * ig;
            let d_f = dc[j] * c_prev[j];
            dz[j] = d_i * ig * (1.0 - ig);
            dz[h + j] = d_f * fg * (1.0 - fg);
            dz[2 * h + j] = d_g * (1.0 - gg * gg);
            dz[3 * h + j] = d_o * og * (1.0 - og);
            dc[j] *= fg;
        }
        let u = &cache.fused[l];
        add_outer(&mut grad[range(ParamGroup::LstmWx)], &dz, u);
        add_outer(&mut grad[range(ParamGroup::LstmWh)], &dz, &cache.hiddens[l]);
        grad[range(ParamGroup::LstmB)]
            .iter_mut()
            .zip(&dz)
            .for_each(|(gv, v)| *gv += v);
        let mut du = vec![0.0; d.fusion];
        add_transposed(params.group(ParamGroup::LstmWx), &dz, &mut du);
        dh.fill(0.0);
        add_transposed(params.group(ParamGroup::LstmWh), &dz, &mut dh);
        let da: Vec<f64> = du.iter().zip(u).map(|(g, a)| g * (1.0 - a * a)).collect();
        let x = &cache.input[l * d.input()..(l + 1) * d.input()];
        add_outer(&mut grad[range(ParamGroup::FusionW)], &da, x);
        grad[range(ParamGroup::FusionB)]
            .iter_mut()
            .zip(&da)
            .for_each(|(gv, v)| *gv += v);
    }
    Ok(())
}

/// Gradient of one sample's loss.
pub fn backward(params: &ProbeParams, cache: &ForwardCache, label: usize) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; params.dims().total()];
    backward_into(params, cache, label, &mut grad)?;
    Ok(grad)
}

/// Summed loss, correct count and summed gradient over a batch.
#[derive(Debug, Clone)]
pub struct BatchGradient {
    pub loss_sum: f64,
    pub correct: usize,
    pub grad_sum: Vec<f64>,
}

/// Samples per gradient shard. Shards are summed in index order, so the
/// result is bit-identical in sequential and parallel mode.
const SHARD: usize = 8;

pub fn batch_gradient(
    params: &ProbeParams,
    batch: &[(&ExtractedRep, usize)],
    mode: Parallelism,
) -> Result<BatchGradient> {
    let shards: Vec<&[(&ExtractedRep, usize)]> = batch.chunks(SHARD).collect();
    let partials = par::try_map_range(mode, shards.len(), |s| -> Result<BatchGradient> {
        let mut acc = BatchGradient {
            loss_sum: 0.0,
            correct: 0,
            grad_sum: vec![0.0; params.dims().total()],
        };
        for &(rep, label) in shards[s] {
            let (score, cache) = forward(params, rep)?;
            acc.loss_sum += super::loss_ce(&score, label)?;
            acc.correct += usize::from(score.argmax() == label);
            backward_into(params, &cache, label, &mut acc.grad_sum)?;
        }
        Ok(acc)
    })?;
    let mut total = BatchGradient {
        loss_sum: 0.0,
        correct: 0,
        grad_sum: vec![0.0; params.dims().total()],
    };
    for p in partials {
        total.loss_sum += p.loss_sum;
        total.correct += p.correct;
        total.grad_sum.iter_mut().zip(&p.grad_sum).for_each(|(a, b)| *a += b);
    }
    Ok(total)
}
