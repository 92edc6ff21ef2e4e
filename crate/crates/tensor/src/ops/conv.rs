use crate::scalar::{gemm, MatRef};
use crate::{Graph, Scalar, Tensor, Var};

/// Upper bound on im2col buffer elements; larger problems are processed in
/// slabs along the first output axis.
const COL_BUDGET: usize = 1 << 23;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Conv3dSpec {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self { stride: [stride; 3], padding: [padding; 3] }
    }
}

pub fn conv3d_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    assert!(input + 2 * padding >= kernel, "kernel {kernel} larger than padded input {input}+2*{padding}");
    (input + 2 * padding - kernel) / stride + 1
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    cin: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    out: [usize; 3],
    spec: Conv3dSpec,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }

    fn plane(&self) -> usize {
        self.out[1] * self.out[2]
    }

    fn positions(&self) -> usize {
        self.out[0] * self.plane()
    }

    fn pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.spec.stride == [1, 1, 1] && self.spec.padding == [0, 0, 0]
    }

    fn slab(&self) -> usize {
        (COL_BUDGET / (self.rows() * self.plane()).max(1)).clamp(1, self.out[0])
    }

    /// Valid output index range `[lo, hi)` along one axis for kernel tap `tap`.
    fn valid(&self, axis: usize, tap: usize) -> (usize, usize) {
        let (s, p, n, o) = (self.spec.stride[axis], self.spec.padding[axis], self.input[axis], self.out[axis]);
        let lo = if tap >= p { 0 } else { (p - tap).div_ceil(s) };
        let hi = if n + p > tap { ((n + p - tap - 1) / s + 1).min(o) } else { 0 };
        (lo.min(hi), hi)
    }
}

/// Gather input patches for output rows `oa..ob` into `col [rows, (ob-oa)*plane]`.
fn im2col<T: Scalar>(x: &[T], g: &Geometry, oa: usize, ob: usize, col: &mut [T]) {
    let [_, ny, nz] = g.input;
    let [kx, ky, kz] = g.kernel;
    let [sx, sy, sz] = g.spec.stride;
    let [px, py, pz] = g.spec.padding;
    let [_, oy, oz] = g.out;
    let pc = (ob - oa) * oy * oz;
    col[..g.rows() * pc].fill(T::zero());
    for ci in 0..g.cin {
        for dx in 0..kx {
            let (xlo, xhi) = g.valid(0, dx);
            for dy in 0..ky {
                let (ylo, yhi) = g.valid(1, dy);
                for dz in 0..kz {
                    let (zlo, zhi) = g.valid(2, dz);
                    let row = ((ci * kx + dx) * ky + dy) * kz + dz;
                    let dst = &mut col[row * pc..(row + 1) * pc];
                    for ox in oa.max(xlo)..ob.min(xhi) {
                        let ix = ox * sx + dx - px;
                        for oy_ in ylo..yhi {
                            let iy = oy_ * sy + dy - py;
                            let src = ((ci * g.input[0] + ix) * ny + iy) * nz;
                            let d = ((ox - oa) * oy + oy_) * oz;
                            if sz == 1 {
                                let iz0 = zlo + dz - pz;
                                dst[d + zlo..d + zhi].copy_from_slice(&x[src + iz0..src + iz0 + (zhi - zlo)]);
                            } else {
                                for oz_ in zlo..zhi {
                                    dst[d + oz_] = x[src + oz_ * sz + dz - pz];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add `col` back onto the input gradient; adjoint of [`im2col`].
fn col2im<T: Scalar>(col: &[T], g: &Geometry, oa: usize, ob: usize, dx_out: &mut [T]) {
    let [_, ny, nz] = g.input;
    let [kx, ky, kz] = g.kernel;
    let [sx, sy, sz] = g.spec.stride;
    let [px, py, pz] = g.spec.padding;
    let [_, oy, oz] = g.out;
    let pc = (ob - oa) * oy * oz;
    for ci in 0..g.cin {
        for dx in 0..kx {
            let (xlo, xhi) = g.valid(0, dx);
            for dy in 0..ky {
                let (ylo, yhi) = g.valid(1, dy);
                for dz in 0..kz {
                    let (zlo, zhi) = g.valid(2, dz);
                    let row = ((ci * kx + dx) * ky + dy) * kz + dz;
                    let src_row = &col[row * pc..(row + 1) * pc];
                    for ox in oa.max(xlo)..ob.min(xhi) {
                        let ix = ox * sx + dx - px;
                        for oy_ in ylo..yhi {
                            let iy = oy_ * sy + dy - py;
                            let dst = ((ci * g.input[0] + ix) * ny + iy) * nz;
                            let s = ((ox - oa) * oy + oy_) * oz;
                            for oz_ in zlo..zhi {
                                dx_out[dst + oz_ * sz + dz - pz] += src_row[s + oz_];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvTranspose1dSpec {
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

impl<T: Scalar> Graph<T> {
    /// 3-D convolution of `x [n, cin, d, h, w]` with `w [cout, cin, kd, kh, kw]`.
    pub fn conv3d(&self, x: Var, w: Var, b: Option<Var>, spec: Conv3dSpec) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let (xs, ws) = (xv.shape().to_vec(), wv.shape().to_vec());
        assert_eq!(xs.len(), 5, "conv3d input must be [n, c, d, h, w], got {xs:?}");
        assert_eq!(ws.len(), 5, "conv3d weight must be 5-d, got {ws:?}");
        assert_eq!(xs[1], ws[1], "conv3d: input channels {} vs weight {}", xs[1], ws[1]);
        let (n, cout) = (xs[0], ws[0]);
        let kernel = [ws[2], ws[3], ws[4]];
        let input = [xs[2], xs[3], xs[4]];
        let out: [usize; 3] =
            std::array::from_fn(|a| conv3d_output_extent(input[a], kernel[a], spec.stride[a], spec.padding[a]));
        let geo = Geometry { cin: xs[1], input, kernel, out, spec };
        let out_shape = [n, cout, out[0], out[1], out[2]];
        let bv = b.map(|b| self.value(b));
        if let Some(bv) = &bv {
            assert_eq!(bv.shape(), [cout], "conv3d bias shape");
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        if self.any_meta(&parents) {
            return self.emit(Tensor::meta(&out_shape), &parents, |_| |_: &Tensor<T>| Vec::new());
        }

        let (rows, p) = (geo.rows(), geo.positions());
        let in_per = xs[1..].iter().product::<usize>();
        let mut y = vec![T::zero(); n * cout * p];
        if let Some(bv) = &bv {
            for (i, chunk) in y.chunks_mut(p).enumerate() {
                chunk.fill(bv.data()[i % cout]);
            }
        }
        let beta = if bv.is_some() { T::one() } else { T::zero() };
        let slab = geo.slab();
        let mut col = if geo.pointwise() { Vec::new() } else { vec![T::zero(); rows * slab * geo.plane()] };
        for s in 0..n {
            let xn = &xv.data()[s * in_per..(s + 1) * in_per];
            let yn = &mut y[s * cout * p..(s + 1) * cout * p];
            if geo.pointwise() {
                gemm(MatRef::new(wv.data(), cout, rows), MatRef::new(xn, rows, p), beta, yn, p);
                continue;
            }
            let mut oa = 0;
            while oa < out[0] {
                let ob = (oa + slab).min(out[0]);
                let pc = (ob - oa) * geo.plane();
                im2col(xn, &geo, oa, ob, &mut col);
                let off = oa * geo.plane();
                gemm(
                    MatRef::new(wv.data(), cout, rows),
                    MatRef::new(&col[..rows * pc], rows, pc),
                    beta,
                    &mut yn[off..],
                    p,
                );
                oa = ob;
            }
        }

        let need_dx = self.requires_grad(x);
        let has_bias = b.is_some();
        self.emit(Tensor::new(&out_shape, y), &parents, move |_| {
            move |g: &Tensor<T>| {
                let gd = g.data();
                let mut dw = vec![T::zero(); cout * rows];
                let mut dx = if need_dx { vec![T::zero(); n * in_per] } else { Vec::new() };
                let mut col = vec![T::zero(); if geo.pointwise() { 0 } else { rows * slab * geo.plane() }];
                let mut dcol = vec![T::zero(); if need_dx && !geo.pointwise() { rows * slab * geo.plane() } else { 0 }];
                for s in 0..n {
                    let xn = &xv.data()[s * in_per..(s + 1) * in_per];
                    let gn = &gd[s * cout * p..(s + 1) * cout * p];
                    if geo.pointwise() {
                        gemm(MatRef::new(gn, cout, p), MatRef::transposed(xn, p, rows), T::one(), &mut dw, rows);
                        if need_dx {
                            let dxn = &mut dx[s * in_per..(s + 1) * in_per];
                            gemm(MatRef::transposed(wv.data(), rows, cout), MatRef::new(gn, cout, p), T::zero(), dxn, p);
                        }
                        continue;
                    }
                    let mut oa = 0;
                    while oa < out[0] {
                        let ob = (oa + slab).min(out[0]);
                        let pc = (ob - oa) * geo.plane();
                        let off = oa * geo.plane();
                        let g_chunk = MatRef::new(&gn[off..], cout, pc).with_ld(p);
                        im2col(xn, &geo, oa, ob, &mut col);
                        gemm(g_chunk, MatRef::transposed(&col[..rows * pc], pc, rows), T::one(), &mut dw, rows);
                        if need_dx {
                            gemm(
                                MatRef::transposed(wv.data(), rows, cout),
                                g_chunk,
                                T::zero(),
                                &mut dcol[..rows * pc],
                                pc,
                            );
                            col2im(&dcol, &geo, oa, ob, &mut dx[s * in_per..(s + 1) * in_per]);
                        }
                        oa = ob;
                    }
                }
                let mut grads = vec![
                    need_dx.then(|| Tensor::new(&xs, dx)),
                    Some(Tensor::new(&ws, dw)),
                ];
                if has_bias {
                    let mut db = vec![T::zero(); cout];
                    for (i, chunk) in gd.chunks(p).enumerate() {
                        db[i % cout] += chunk.iter().copied().sum::<T>();
                    }
                    grads.push(Some(Tensor::new(&[cout], db)));
                }
                grads
            }
        })
    }

    /// 1-D transposed convolution of `x [n, cin, l]` with `w [cin, cout, k]`;
    /// output length `(l - 1) * stride - 2 * padding + k + output_padding`.
    pub fn conv_transpose1d(&self, x: Var, w: Var, b: Option<Var>, spec: ConvTranspose1dSpec) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let (xs, ws) = (xv.shape().to_vec(), wv.shape().to_vec());
        assert_eq!(xs.len(), 3, "conv_transpose1d input must be [n, c, l], got {xs:?}");
        assert_eq!(ws.len(), 3, "conv_transpose1d weight must be [cin, cout, k], got {ws:?}");
        assert_eq!(xs[1], ws[0], "conv_transpose1d channel mismatch");
        let (n, cin, l) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[1], ws[2]);
        let ConvTranspose1dSpec { stride, padding, output_padding } = spec;
        assert!(l >= 1 && (l - 1) * stride + k + output_padding > 2 * padding, "conv_transpose1d: empty output");
        let lo = (l - 1) * stride + k + output_padding - 2 * padding;
        let out_shape = [n, cout, lo];
        let mut parents = vec![x, w];
        parents.extend(b);
        if self.any_meta(&parents) {
            return self.emit(Tensor::meta(&out_shape), &parents, |_| |_: &Tensor<T>| Vec::new());
        }
        // Output position for input index i and tap t, if inside the output.
        let target = move |i: usize, t: usize| -> Option<usize> {
            let pos = i * stride + t;
            (pos >= padding && pos - padding < lo).then(|| pos - padding)
        };
        let mut y = vec![T::zero(); n * cout * lo];
        if let Some(b) = b {
            let bv = self.value(b);
            for (i, row) in y.chunks_mut(lo).enumerate() {
                row.fill(bv.data()[i % cout]);
            }
        }
        let (xd, wd) = (xv.data(), wv.data());
        for s in 0..n {
            for ci in 0..cin {
                for i in 0..l {
                    let xval = xd[(s * cin + ci) * l + i];
                    for co in 0..cout {
                        for t in 0..k {
                            if let Some(o) = target(i, t) {
                                y[(s * cout + co) * lo + o] += xval * wd[(ci * cout + co) * k + t];
                            }
                        }
                    }
                }
            }
        }
        let has_bias = b.is_some();
        self.emit(Tensor::new(&out_shape, y), &parents, move |_| {
            move |g: &Tensor<T>| {
                let gd = g.data();
                let (xd, wd) = (xv.data(), wv.data());
                let mut dx = vec![T::zero(); n * cin * l];
                let mut dw = vec![T::zero(); cin * cout * k];
                for s in 0..n {
                    for ci in 0..cin {
                        for i in 0..l {
                            let xval = xd[(s * cin + ci) * l + i];
                            let mut acc = T::zero();
                            for co in 0..cout {
                                for t in 0..k {
                                    if let Some(o) = target(i, t) {
                                        let gv = gd[(s * cout + co) * lo + o];
                                        acc += gv * wd[(ci * cout + co) * k + t];
                                        dw[(ci * cout + co) * k + t] += xval * gv;
                                    }
                                }
                            }
                            dx[(s * cin + ci) * l + i] = acc;
                        }
                    }
                }
                let mut grads = vec![Some(Tensor::new(&xs, dx)), Some(Tensor::new(&ws, dw))];
                if has_bias {
                    let mut db = vec![T::zero(); cout];
                    for (i, row) in gd.chunks(lo).enumerate() {
                        db[i % cout] += row.iter().copied().sum::<T>();
                    }
                    grads.push(Some(Tensor::new(&[cout], db)));
                }
                grads
            }
        })
    }
}
