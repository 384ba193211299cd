//! Forward operations and their backward closures.

use super::tape::{Tape, Var};
use super::{Scalar, Tensor};

impl<F: Scalar> Tape<F> {
    pub(super) fn unary(
        &self,
        a: Var,
        value: Tensor<F>,
        back: impl Fn(&Tensor<F>) -> Tensor<F> + 'static,
    ) -> Var {
        self.push(value, vec![a], Some(Box::new(move |g| vec![back(g)])))
    }

    fn same_shape(&self, a: Var, b: Var, name: &str) {
        let sa = self.shape_of(a);
        let sb = self.shape_of(b);
        assert_eq!(sa, sb, "{}: shape mismatch {:?} vs {:?}", name, sa, sb);
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let value = self.with_value(a, |x| {
            self.with_value(b, |y| {
                Tensor::new(
                    x.shape().to_vec(),
                    x.data().iter().zip(y.data()).map(|(&u, &v)| u + v).collect(),
                )
            })
        });
        self.push(
            value,
            vec![a, b],
            Some(Box::new(|g| vec![g.clone(), g.clone()])),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let value = self.with_value(a, |x| {
            self.with_value(b, |y| {
                Tensor::new(
                    x.shape().to_vec(),
                    x.data().iter().zip(y.data()).map(|(&u, &v)| u - v).collect(),
                )
            })
        });
        self.push(
            value,
            vec![a, b],
            Some(Box::new(|g| vec![g.clone(), g.map(|v| -v)])),
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let xa = self.value(a);
        let xb = self.value(b);
        let value = Tensor::new(
            xa.shape().to_vec(),
            xa.data().iter().zip(xb.data()).map(|(&u, &v)| u * v).collect(),
        );
        self.push(
            value,
            vec![a, b],
            Some(Box::new(move |g| {
                let da = Tensor::new(
                    xb.shape().to_vec(),
                    g.data().iter().zip(xb.data()).map(|(&u, &v)| u * v).collect(),
                );
                let db = Tensor::new(
                    xa.shape().to_vec(),
                    g.data().iter().zip(xa.data()).map(|(&u, &v)| u * v).collect(),
                );
                vec![da, db]
            })),
        )
    }

    pub fn scale(&self, a: Var, c: F) -> Var {
        let value = self.with_value(a, |x| x.map(|v| v * c));
        self.unary(a, value, move |g| g.map(|v| v * c))
    }

    pub fn add_scalar(&self, a: Var, c: F) -> Var {
        let value = self.with_value(a, |x| x.map(|v| v + c));
        self.unary(a, value, |g| g.clone())
    }

    /// (m x k) * (k x n) -> (m x n)
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let xa = self.value(a);
        let xb = self.value(b);
        assert_eq!(xa.shape().len(), 2, "matmul lhs must be rank 2");
        assert_eq!(xb.shape().len(), 2, "matmul rhs must be rank 2");
        let (m, k) = (xa.shape()[0], xa.shape()[1]);
        let (k2, n) = (xb.shape()[0], xb.shape()[1]);
        assert_eq!(k, k2, "matmul inner dims {} vs {}", k, k2);
        let mut out = vec![F::zero(); m * n];
        F::gemm(m, k, n, xa.data(), false, xb.data(), false, &mut out);
        self.push(
            Tensor::new(vec![m, n], out),
            vec![a, b],
            Some(Box::new(move |g| {
                let mut da = vec![F::zero(); m * k];
                // da = g * b^T
                F::gemm(m, n, k, g.data(), false, xb.data(), true, &mut da);
                let mut db = vec![F::zero(); k * n];
                // db = a^T * g
                F::gemm(k, m, n, xa.data(), true, g.data(), false, &mut db);
                vec![Tensor::new(vec![m, k], da), Tensor::new(vec![k, n], db)]
            })),
        )
    }

    pub fn relu(&self, a: Var) -> Var {
        let x = self.value(a);
        let value = x.map(|v| if v > F::zero() { v } else { F::zero() });
        self.unary(a, value, move |g| {
            Tensor::new(
                x.shape().to_vec(),
                g.data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv > F::zero() { gv } else { F::zero() })
                    .collect(),
            )
        })
    }

    pub fn leaky_relu(&self, a: Var, slope: F) -> Var {
        let x = self.value(a);
        let value = x.map(|v| if v > F::zero() { v } else { v * slope });
        self.unary(a, value, move |g| {
            Tensor::new(
                x.shape().to_vec(),
                g.data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv > F::zero() { gv } else { gv * slope })
                    .collect(),
            )
        })
    }

    pub fn tanh(&self, a: Var) -> Var {
        let value = self.with_value(a, |x| x.map(|v| v.tanh()));
        let y = value.clone();
        self.unary(a, value, move |g| {
            Tensor::new(
                y.shape().to_vec(),
                g.data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gv, &yv)| gv * (F::one() - yv * yv))
                    .collect(),
            )
        })
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let value = self.with_value(a, |x| x.map(|v| F::one() / (F::one() + (-v).exp())));
        let y = value.clone();
        self.unary(a, value, move |g| {
            Tensor::new(
                y.shape().to_vec(),
                g.data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gv, &yv)| gv * yv * (F::one() - yv))
                    .collect(),
            )
        })
    }

    pub fn log(&self, a: Var) -> Var {
        let x = self.value(a);
        let value = x.map(|v| v.ln());
        self.unary(a, value, move |g| {
            Tensor::new(
                x.shape().to_vec(),
                g.data().iter().zip(x.data()).map(|(&gv, &xv)| gv / xv).collect(),
            )
        })
    }

    /// Elementwise clamp; gradient passes through strictly inside the range.
    pub fn clamp(&self, a: Var, lo: F, hi: F) -> Var {
        let x = self.value(a);
        let value = x.map(|v| v.max(lo).min(hi));
        self.unary(a, value, move |g| {
            Tensor::new(
                x.shape().to_vec(),
                g.data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv > lo && xv < hi { gv } else { F::zero() })
                    .collect(),
            )
        })
    }

    pub fn sum(&self, a: Var) -> Var {
        let x = self.value(a);
        let value = Tensor::scalar(x.data().iter().copied().sum());
        let shape = x.shape().to_vec();
        self.unary(a, value, move |g| Tensor::full(shape.clone(), g.item()))
    }

    pub fn mean(&self, a: Var) -> Var {
        let x = self.value(a);
        let n = F::from_f64(x.len() as f64);
        let value = Tensor::scalar(x.data().iter().copied().sum::<F>() / n);
        let shape = x.shape().to_vec();
        self.unary(a, value, move |g| Tensor::full(shape.clone(), g.item() / n))
    }

    /// Row sums of a rank-2 tensor: (n x d) -> (n).
    pub fn sum_rows(&self, a: Var) -> Var {
        let x = self.value(a);
        assert_eq!(x.shape().len(), 2, "sum_rows needs rank 2");
        let (n, d) = (x.shape()[0], x.shape()[1]);
        let value = Tensor::new(
            vec![n],
            (0..n)
                .map(|i| x.data()[i * d..(i + 1) * d].iter().copied().sum())
                .collect(),
        );
        self.unary(a, value, move |g| {
            let mut out = vec![F::zero(); n * d];
            for i in 0..n {
                let gv = g.data()[i];
                for v in &mut out[i * d..(i + 1) * d] {
                    *v = gv;
                }
            }
            Tensor::new(vec![n, d], out)
        })
    }

    /// Adds a bias vector along the last axis.
    pub fn bias_add(&self, a: Var, bias: Var) -> Var {
        let x = self.value(a);
        let b = self.value(bias);
        let c = *x.shape().last().expect("bias_add on rank 0");
        assert_eq!(b.shape(), &[c], "bias_add: bias shape {:?} vs channels {}", b.shape(), c);
        let mut data = x.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v = *v + b.data()[i % c];
        }
        self.push(
            Tensor::new(x.shape().to_vec(), data),
            vec![a, bias],
            Some(Box::new(move |g| {
                let mut db = vec![F::zero(); c];
                for (i, &gv) in g.data().iter().enumerate() {
                    db[i % c] = db[i % c] + gv;
                }
                vec![g.clone(), Tensor::new(vec![c], db)]
            })),
        )
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let values: Vec<Tensor<F>> = parts.iter().map(|&v| self.value(v)).collect();
        let refs: Vec<&Tensor<F>> = values.iter().collect();
        let out = Tensor::concat(&refs, axis);
        let sizes: Vec<usize> = values.iter().map(|t| t.shape()[axis]).collect();
        self.push(
            out,
            parts.to_vec(),
            Some(Box::new(move |g| g.split(axis, &sizes))),
        )
    }

    pub fn reshape(&self, a: Var, shape: Vec<usize>) -> Var {
        let x = self.value(a);
        let old = x.shape().to_vec();
        let value = x.reshaped(shape);
        self.unary(a, value, move |g| g.clone().reshaped(old.clone()))
    }

    /// Normalizes each row of a rank-2 tensor to unit length. Rows with norm
    /// below `eps` are divided by `eps` instead.
    pub fn l2_normalize(&self, a: Var, eps: F) -> Var {
        let x = self.value(a);
        assert_eq!(x.shape().len(), 2, "l2_normalize needs rank 2");
        let (n, d) = (x.shape()[0], x.shape()[1]);
        let mut norms = Vec::with_capacity(n);
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            let row = &x.data()[i * d..(i + 1) * d];
            let norm = row.iter().map(|&v| v * v).sum::<F>().sqrt().max(eps);
            norms.push(norm);
            data.extend(row.iter().map(|&v| v / norm));
        }
        let y = Tensor::new(vec![n, d], data);
        let yc = y.clone();
        self.unary(a, y, move |g| {
            let mut out = vec![F::zero(); n * d];
            for i in 0..n {
                let yr = &yc.data()[i * d..(i + 1) * d];
                let gr = &g.data()[i * d..(i + 1) * d];
                let dot: F = yr.iter().zip(gr).map(|(&u, &v)| u * v).sum();
                for j in 0..d {
                    out[i * d + j] = (gr[j] - yr[j] * dot) / norms[i];
                }
            }
            Tensor::new(vec![n, d], out)
        })
    }

    /// Gradient barrier: value passes through, gradients stop here.
    pub fn stop_gradient(&self, a: Var) -> Var {
        let value = self.value(a);
        self.push(value, vec![a], None)
    }

    /// Zero-mean normalized cross correlation, per channel over spatial
    /// positions, averaged over channels and batch. Accepts rank 3 (h,w,c)
    /// or rank 4 (n,h,w,c); both inputs must share one shape. A variance
    /// floor keeps constant images finite.
    pub fn zncc(&self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "zncc");
        let x = self.value(a);
        let y = self.value(b);
        let shape = x.shape().to_vec();
        let (n, h, w, c) = match shape.len() {
            3 => (1, shape[0], shape[1], shape[2]),
            4 => (shape[0], shape[1], shape[2], shape[3]),
            r => panic!("zncc needs rank 3 or 4, got {}", r),
        };
        let p = h * w;
        let pf = F::from_f64(p as f64);
        let floor = F::from_f64(1e-6);
        let nc = n * c;
        let ncf = F::from_f64(nc as f64);

        // Per (batch, channel) statistics over spatial positions.
        let mut mx = vec![F::zero(); nc];
        let mut my = vec![F::zero(); nc];
        for bi in 0..n {
            for pi in 0..p {
                for ci in 0..c {
                    let idx = (bi * p + pi) * c + ci;
                    mx[bi * c + ci] = mx[bi * c + ci] + x.data()[idx];
                    my[bi * c + ci] = my[bi * c + ci] + y.data()[idx];
                }
            }
        }
        for v in mx.iter_mut().chain(my.iter_mut()) {
            *v = *v / pf;
        }
        let mut sxx = vec![F::zero(); nc];
        let mut syy = vec![F::zero(); nc];
        let mut sxy = vec![F::zero(); nc];
        for bi in 0..n {
            for pi in 0..p {
                for ci in 0..c {
                    let k = bi * c + ci;
                    let idx = (bi * p + pi) * c + ci;
                    let xv = x.data()[idx] - mx[k];
                    let yv = y.data()[idx] - my[k];
                    sxx[k] = sxx[k] + xv * xv;
                    syy[k] = syy[k] + yv * yv;
                    sxy[k] = sxy[k] + xv * yv;
                }
            }
        }
        let sx: Vec<F> = sxx.iter().map(|&v| (v / pf + floor).sqrt()).collect();
        let sy: Vec<F> = syy.iter().map(|&v| (v / pf + floor).sqrt()).collect();
        let z: Vec<F> = (0..nc).map(|k| sxy[k] / (sx[k] * sy[k] * pf)).collect();
        let value = Tensor::scalar(z.iter().copied().sum::<F>() / ncf);

        self.push(
            value,
            vec![a, b],
            Some(Box::new(move |g| {
                let gv = g.item() / ncf;
                let mut dx = vec![F::zero(); x.len()];
                let mut dy = vec![F::zero(); y.len()];
                for bi in 0..n {
                    for pi in 0..p {
                        for ci in 0..c {
                            let k = bi * c + ci;
                            let idx = (bi * p + pi) * c + ci;
                            let xv = x.data()[idx] - mx[k];
                            let yv = y.data()[idx] - my[k];
                            // d z_k / d x_i = y_i / (P sx sy) - z_k x_i / (P sx^2)
                            dx[idx] = gv * (yv / (pf * sx[k] * sy[k]) - z[k] * xv / (pf * sx[k] * sx[k]));
                            dy[idx] = gv * (xv / (pf * sx[k] * sy[k]) - z[k] * yv / (pf * sy[k] * sy[k]));
                        }
                    }
                }
                vec![
                    Tensor::new(x.shape().to_vec(), dx),
                    Tensor::new(y.shape().to_vec(), dy),
                ]
            })),
        )
    }
}
