use crate::numerics::Matrix;

use super::params::check_params;
use super::{InputShape, Layer, NetworkParams, NetworkSpec, NnError};

/// Everything the backward pass needs from a forward pass.
pub struct ForwardTrace {
    /// `activations[0]` is the input batch; `activations[i + 1]` is the
    /// output of layer `i`. The last entry holds the logits.
    pub activations: Vec<Matrix>,
    /// Per max-pool layer (spec index), the flat input index each output
    /// entry was copied from, batch-major in output order.
    pool_argmax: Vec<Option<Vec<usize>>>,
    /// Per conv layer (spec index), the im2col patch matrix.
    conv_patches: Vec<Option<Matrix>>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &Matrix {
        self.activations.last().expect("trace has at least the input")
    }

    /// Argmax routing recorded by the pool layer at `spec_layer`, if it is
    /// one. One flat input index per output entry, batch-major.
    pub fn pool_argmax_for_layer(&self, spec_layer: usize) -> Option<&[usize]> {
        self.pool_argmax.get(spec_layer)?.as_deref()
    }
}

fn image_dims(shape: InputShape) -> (usize, usize, usize) {
    match shape {
        InputShape::Image { h, w, c } => (h, w, c),
        InputShape::Flat(_) => unreachable!("validated as image"),
    }
}

fn col_sums(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        let row = m.row(i);
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

fn im2col(input: &Matrix, h: usize, w: usize, c: usize, kh: usize, kw: usize) -> Matrix {
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let b = input.rows();
    let mut patches = Matrix::zeros(b * oh * ow, kh * kw * c);
    for bi in 0..b {
        let row = input.row(bi);
        for oy in 0..oh {
            for ox in 0..ow {
                let pr = (bi * oh + oy) * ow + ox;
                let pd = patches.row_mut(pr);
                for ky in 0..kh {
                    for kx in 0..kw {
                        for ci in 0..c {
                            pd[(ky * kw + kx) * c + ci] =
                                row[((oy + ky) * w + (ox + kx)) * c + ci];
                        }
                    }
                }
            }
        }
    }
    patches
}

/// Runs the network on a batch (one example per row), keeping every
/// intermediate needed for backprop.
pub fn forward_trace(
    spec: &NetworkSpec,
    params: &NetworkParams,
    batch: &Matrix,
) -> Result<ForwardTrace, NnError> {
    check_params(spec, params)?;
    let shapes = spec.shape_chain()?;
    if batch.cols() != spec.input.len() {
        return Err(NnError::ShapeMismatch(format!(
            "batch rows have {} entries, spec input needs {}",
            batch.cols(),
            spec.input.len()
        )));
    }
    let b = batch.rows();
    let mut activations = Vec::with_capacity(spec.layers.len() + 1);
    activations.push(batch.clone());
    let mut pool_argmax = vec![None; spec.layers.len()];
    let mut conv_patches = vec![None; spec.layers.len()];
    let mut pi = 0usize;
    for (li, layer) in spec.layers.iter().enumerate() {
        let cur = activations.last().expect("nonempty");
        let next = match layer {
            Layer::Dense { .. } | Layer::RandomFeatures { .. } => {
                let lp = &params.layers[pi];
                pi += 1;
                let mut out = cur.matmul(&lp.weights);
                if !lp.bias.is_empty() {
                    for r in 0..out.rows() {
                        let row = out.row_mut(r);
                        for (v, bv) in row.iter_mut().zip(&lp.bias) {
                            *v += bv;
                        }
                    }
                }
                out
            }
            Layer::Relu => {
                let mut out = cur.clone();
                for v in out.data_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                out
            }
            Layer::Flatten => cur.clone(),
            Layer::Conv2d { kernel: (kh, kw), out_channels, .. } => {
                let (h, w, c) = image_dims(shapes[li]);
                let (oh, ow) = (h - kh + 1, w - kw + 1);
                let lp = &params.layers[pi];
                pi += 1;
                let patches = im2col(cur, h, w, c, *kh, *kw);
                let prod = patches.matmul(&lp.weights);
                let ocn = *out_channels;
                let mut out = Matrix::zeros(b, oh * ow * ocn);
                for bi in 0..b {
                    let orow = out.row_mut(bi);
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let prow = prod.row((bi * oh + oy) * ow + ox);
                            for oc in 0..ocn {
                                orow[(oy * ow + ox) * ocn + oc] = prow[oc] + lp.bias[oc];
                            }
                        }
                    }
                }
                conv_patches[li] = Some(patches);
                out
            }
            Layer::MaxPool { h: ph, w: pw } => {
                let (h, w, c) = image_dims(shapes[li]);
                let (oh, ow) = (h / ph, w / pw);
                let mut out = Matrix::zeros(b, oh * ow * c);
                let mut argmax = Vec::with_capacity(b * oh * ow * c);
                for bi in 0..b {
                    let row = cur.row(bi);
                    let orow = out.row_mut(bi);
                    for oy in 0..oh {
                        for ox in 0..ow {
                            for ch in 0..c {
                                let mut best = f64::NEG_INFINITY;
                                let mut best_idx = 0usize;
                                // row-major window scan; strict > keeps the
                                // first maximal element
                                for py in 0..*ph {
                                    for px in 0..*pw {
                                        let idx =
                                            ((oy * ph + py) * w + (ox * pw + px)) * c + ch;
                                        if row[idx] > best {
                                            best = row[idx];
                                            best_idx = idx;
                                        }
                                    }
                                }
                                orow[(oy * ow + ox) * c + ch] = best;
                                argmax.push(best_idx);
                            }
                        }
                    }
                }
                pool_argmax[li] = Some(argmax);
                out
            }
        };
        activations.push(next);
    }
    Ok(ForwardTrace { activations, pool_argmax, conv_patches })
}

/// Logits for a batch, without keeping intermediates.
pub fn forward(
    spec: &NetworkSpec,
    params: &NetworkParams,
    batch: &Matrix,
) -> Result<Matrix, NnError> {
    let trace = forward_trace(spec, params, batch)?;
    Ok(trace.activations.into_iter().last().expect("nonempty"))
}

/// Backpropagates a logit gradient through a recorded trace.
///
/// Returns parameter gradients shaped exactly like the parameters. Frozen
/// layers get their true gradients too; skipping them is the optimizer's
/// job, which keeps finite-difference checks meaningful for every layer.
pub(super) fn backward(
    spec: &NetworkSpec,
    params: &NetworkParams,
    trace: &ForwardTrace,
    dlogits: &Matrix,
) -> Result<NetworkParams, NnError> {
    let shapes = spec.shape_chain()?;
    let b = trace.activations[0].rows();
    let mut grads_rev: Vec<super::LayerParams> = Vec::new();
    let mut d = dlogits.clone();
    let mut pi = params.layers.len();
    for (li, layer) in spec.layers.iter().enumerate().rev() {
        match layer {
            Layer::Dense { .. } | Layer::RandomFeatures { .. } => {
                pi -= 1;
                let lp = &params.layers[pi];
                let a_in = &trace.activations[li];
                let dw = {
                    // a_in^T d without materializing the transpose
                    let mut dw = Matrix::zeros(a_in.cols(), d.cols());
                    for r in 0..b {
                        let arow = a_in.row(r);
                        let drow = d.row(r);
                        for (i, &av) in arow.iter().enumerate() {
                            if av == 0.0 {
                                continue;
                            }
                            let out = dw.row_mut(i);
                            for (o, &dv) in out.iter_mut().zip(drow) {
                                *o += av * dv;
                            }
                        }
                    }
                    dw
                };
                let db = if lp.bias.is_empty() { vec![] } else { col_sums(&d) };
                let mut dnext = Matrix::zeros(b, a_in.cols());
                for r in 0..b {
                    let drow = d.row(r);
                    let out = dnext.row_mut(r);
                    // d W^T, row by row
                    for i in 0..a_in.cols() {
                        let wrow = lp.weights.row(i);
                        let mut acc = 0.0;
                        for (k, &dv) in drow.iter().enumerate() {
                            acc += dv * wrow[k];
                        }
                        out[i] = acc;
                    }
                }
                grads_rev.push(super::LayerParams { weights: dw, bias: db, frozen: lp.frozen });
                d = dnext;
            }
            Layer::Relu => {
                let a_in = &trace.activations[li];
                for r in 0..b {
                    let arow = a_in.row(r);
                    let drow = d.row_mut(r);
                    for (dv, &av) in drow.iter_mut().zip(arow) {
                        if av <= 0.0 {
                            *dv = 0.0;
                        }
                    }
                }
            }
            Layer::Flatten => {}
            Layer::MaxPool { .. } => {
                let (h, w, c) = image_dims(shapes[li]);
                let argmax = trace.pool_argmax[li].as_ref().expect("pool trace");
                let out_len = d.cols();
                let mut dnext = Matrix::zeros(b, h * w * c);
                for bi in 0..b {
                    let drow = d.row(bi);
                    let nrow = dnext.row_mut(bi);
                    for (j, &dv) in drow.iter().enumerate() {
                        nrow[argmax[bi * out_len + j]] += dv;
                    }
                }
                d = dnext;
            }
            Layer::Conv2d { kernel: (kh, kw), out_channels, .. } => {
                pi -= 1;
                let lp = &params.layers[pi];
                let (h, w, c) = image_dims(shapes[li]);
                let (oh, ow) = (h - kh + 1, w - kw + 1);
                let ocn = *out_channels;
                let patches = trace.conv_patches[li].as_ref().expect("conv trace");
                let mut dprod = Matrix::zeros(b * oh * ow, ocn);
                for bi in 0..b {
                    let drow = d.row(bi);
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let pr = dprod.row_mut((bi * oh + oy) * ow + ox);
                            for oc in 0..ocn {
                                pr[oc] = drow[(oy * ow + ox) * ocn + oc];
                            }
                        }
                    }
                }
                let mut dw = Matrix::zeros(patches.cols(), ocn);
                for r in 0..patches.rows() {
                    let prow = patches.row(r);
                    let drow = dprod.row(r);
                    for (i, &pv) in prow.iter().enumerate() {
                        if pv == 0.0 {
                            continue;
                        }
                        let out = dw.row_mut(i);
                        for (o, &dv) in out.iter_mut().zip(drow) {
                            *o += pv * dv;
                        }
                    }
                }
                let db = col_sums(&dprod);
                // scatter dprod W^T back through the patch mapping
                let mut dnext = Matrix::zeros(b, h * w * c);
                for bi in 0..b {
                    let nrow = dnext.row_mut(bi);
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let drow = dprod.row((bi * oh + oy) * ow + ox);
                            for ky in 0..*kh {
                                for kx in 0..*kw {
                                    for ci in 0..c {
                                        let wrow =
                                            lp.weights.row((ky * kw + kx) * c + ci);
                                        let mut acc = 0.0;
                                        for (oc, &dv) in drow.iter().enumerate() {
                                            acc += dv * wrow[oc];
                                        }
                                        nrow[((oy + ky) * w + (ox + kx)) * c + ci] += acc;
                                    }
                                }
                            }
                        }
                    }
                }
                grads_rev.push(super::LayerParams { weights: dw, bias: db, frozen: lp.frozen });
                d = dnext;
            }
        }
    }
    grads_rev.reverse();
    Ok(NetworkParams { layers: grads_rev })
}
