//! Bilinear resampling with half-pixel centers (the `align_corners = false`
//! convention), plus its adjoint for backpropagation.

/// Per-output-coordinate source taps along one axis: `(i0, i1, w0, w1)`.
fn axis_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f32, f32)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = (src - i0 as f64) as f32;
            (i0, i1, 1.0 - frac, frac)
        })
        .collect()
}

pub fn bilinear_forward(
    src: &[f32],
    channels: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f32> {
    assert_eq!(src.len(), channels * in_h * in_w);
    let ys = axis_taps(in_h, out_h);
    let xs = axis_taps(in_w, out_w);
    let mut out = vec![0.0f32; channels * out_h * out_w];
    for c in 0..channels {
        let plane = &src[c * in_h * in_w..(c + 1) * in_h * in_w];
        let dst = &mut out[c * out_h * out_w..(c + 1) * out_h * out_w];
        for (oy, &(y0, y1, wy0, wy1)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in xs.iter().enumerate() {
                let top = wx0 * plane[y0 * in_w + x0] + wx1 * plane[y0 * in_w + x1];
                let bot = wx0 * plane[y1 * in_w + x0] + wx1 * plane[y1 * in_w + x1];
                dst[oy * out_w + ox] = wy0 * top + wy1 * bot;
            }
        }
    }
    out
}

/// Adjoint of [`bilinear_forward`]: scatters output gradients back onto the
/// source grid.
pub fn bilinear_backward(
    grad_out: &[f32],
    channels: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f32> {
    assert_eq!(grad_out.len(), channels * out_h * out_w);
    let ys = axis_taps(in_h, out_h);
    let xs = axis_taps(in_w, out_w);
    let mut grad_in = vec![0.0f32; channels * in_h * in_w];
    for c in 0..channels {
        let g = &grad_out[c * out_h * out_w..(c + 1) * out_h * out_w];
        let dst = &mut grad_in[c * in_h * in_w..(c + 1) * in_h * in_w];
        for (oy, &(y0, y1, wy0, wy1)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in xs.iter().enumerate() {
                let v = g[oy * out_w + ox];
                dst[y0 * in_w + x0] += wy0 * wx0 * v;
                dst[y0 * in_w + x1] += wy0 * wx1 * v;
                dst[y1 * in_w + x0] += wy1 * wx0 * v;
                dst[y1 * in_w + x1] += wy1 * wx1 * v;
            }
        }
    }
    grad_in
}
