// Eight-lane f64 vector used by the dense kernels. With AVX-512 enabled at
// compile time it maps onto one zmm register; otherwise it is a plain array.
// Both backends perform the same lane-wise IEEE operations in the same order,
// so results are bit-identical between them.

pub(crate) const LANES: usize = 8;

#[inline(always)]
fn lane(s: &[f64], at: usize) -> &[f64; LANES] {
    s[at..at + LANES].try_into().unwrap()
}

#[inline(always)]
fn lane_mut(s: &mut [f64], at: usize) -> &mut [f64; LANES] {
    (&mut s[at..at + LANES]).try_into().unwrap()
}

#[cfg(all(target_arch = "x86_64", target_feature = "avx512f"))]
#[allow(unused_unsafe)]
mod imp {
    use super::{lane, lane_mut, LANES};
    use crate::fastmath::{EXP2_EIGHTHS, EXP_FIELD, EXP_POLY, LN2_8_HI, LN2_8_LO, LOG2E_8, MIN_ARG, SHIFTER};
    use core::arch::x86_64::*;

    #[derive(Clone, Copy)]
    pub(crate) struct V8(__m512d);

    impl V8 {
        #[inline(always)]
        pub fn splat(x: f64) -> Self {
            V8(unsafe { _mm512_set1_pd(x) })
        }
        #[inline(always)]
        pub fn load(s: &[f64], at: usize) -> Self {
            let l = lane(s, at);
            // SAFETY: `l` is exactly LANES readable f64s.
            V8(unsafe { _mm512_loadu_pd(l.as_ptr()) })
        }
        #[inline(always)]
        pub fn store(self, s: &mut [f64], at: usize) {
            let l = lane_mut(s, at);
            // SAFETY: `l` is exactly LANES writable f64s.
            unsafe { _mm512_storeu_pd(l.as_mut_ptr(), self.0) }
        }
        /// # Safety
        /// `at + LANES <= s.len()`.
        #[inline(always)]
        pub unsafe fn load_unchecked(s: &[f64], at: usize) -> Self {
            debug_assert!(at + LANES <= s.len());
            V8(unsafe { _mm512_loadu_pd(s.as_ptr().add(at)) })
        }
        /// # Safety
        /// `at + LANES <= s.len()`.
        #[inline(always)]
        pub unsafe fn store_unchecked(self, s: &mut [f64], at: usize) {
            debug_assert!(at + LANES <= s.len());
            unsafe { _mm512_storeu_pd(s.as_mut_ptr().add(at), self.0) }
        }
        #[inline(always)]
        pub fn to_array(self) -> [f64; LANES] {
            let mut out = [0.0; LANES];
            self.store(&mut out, 0);
            out
        }
        /// `self * b + c` with a single rounding.
        #[inline(always)]
        pub fn mul_add(self, b: V8, c: V8) -> V8 {
            V8(unsafe { _mm512_fmadd_pd(self.0, b.0, c.0) })
        }
        /// `c - self * b` with a single rounding.
        #[inline(always)]
        pub fn neg_mul_add(self, b: V8, c: V8) -> V8 {
            V8(unsafe { _mm512_fnmadd_pd(self.0, b.0, c.0) })
        }
        #[inline(always)]
        pub fn add(self, b: V8) -> V8 {
            V8(unsafe { _mm512_add_pd(self.0, b.0) })
        }
        #[inline(always)]
        pub fn sub(self, b: V8) -> V8 {
            V8(unsafe { _mm512_sub_pd(self.0, b.0) })
        }
        #[inline(always)]
        pub fn mul(self, b: V8) -> V8 {
            V8(unsafe { _mm512_mul_pd(self.0, b.0) })
        }
        /// Lane-wise `if self > b { self } else { b }`.
        #[inline(always)]
        pub fn max(self, b: V8) -> V8 {
            V8(unsafe { _mm512_max_pd(self.0, b.0) })
        }
        /// Lane-wise `exp` for non-positive arguments, as `fastmath::exp_nonpos`.
        #[inline(always)]
        pub fn exp_nonpos(self) -> V8 {
            // `max(MIN_ARG, x)` keeps NaN lanes, like the scalar clamp.
            let x = V8::splat(MIN_ARG).max(self);
            let t = x.mul_add(V8::splat(LOG2E_8), V8::splat(SHIFTER));
            let n = t.sub(V8::splat(SHIFTER));
            let r = n.neg_mul_add(V8::splat(LN2_8_HI), x);
            let r = n.neg_mul_add(V8::splat(LN2_8_LO), r);
            let mut p = V8::splat(EXP_POLY[0]);
            for &c in &EXP_POLY[1..] {
                p = p.mul_add(r, V8::splat(c));
            }
            let scale = unsafe {
                let bits = _mm512_castpd_si512(t.0);
                let base = _mm512_permutexvar_pd(bits, V8::load(&EXP2_EIGHTHS, 0).0);
                let field = _mm512_and_si512(_mm512_slli_epi64::<49>(bits), _mm512_set1_epi64(EXP_FIELD as i64));
                _mm512_castsi512_pd(_mm512_add_epi64(_mm512_castpd_si512(base), field))
            };
            p.mul(V8(scale))
        }
    }
}

#[cfg(not(all(target_arch = "x86_64", target_feature = "avx512f")))]
mod imp {
    use super::{lane, lane_mut, LANES};
    use crate::fastmath::exp_nonpos;

    #[derive(Clone, Copy)]
    pub(crate) struct V8([f64; LANES]);

    #[inline(always)]
    fn map2(a: V8, b: V8, f: impl Fn(f64, f64) -> f64) -> V8 {
        let mut out = [0.0; LANES];
        for j in 0..LANES {
            out[j] = f(a.0[j], b.0[j]);
        }
        V8(out)
    }

    impl V8 {
        #[inline(always)]
        pub fn splat(x: f64) -> Self {
            V8([x; LANES])
        }
        #[inline(always)]
        pub fn load(s: &[f64], at: usize) -> Self {
            V8(*lane(s, at))
        }
        #[inline(always)]
        pub fn store(self, s: &mut [f64], at: usize) {
            *lane_mut(s, at) = self.0;
        }
        /// # Safety
        /// `at + LANES <= s.len()`.
        #[inline(always)]
        pub unsafe fn load_unchecked(s: &[f64], at: usize) -> Self {
            debug_assert!(at + LANES <= s.len());
            V8(unsafe { s.as_ptr().add(at).cast::<[f64; LANES]>().read_unaligned() })
        }
        /// # Safety
        /// `at + LANES <= s.len()`.
        #[inline(always)]
        pub unsafe fn store_unchecked(self, s: &mut [f64], at: usize) {
            debug_assert!(at + LANES <= s.len());
            unsafe { s.as_mut_ptr().add(at).cast::<[f64; LANES]>().write_unaligned(self.0) }
        }
        #[inline(always)]
        pub fn to_array(self) -> [f64; LANES] {
            self.0
        }
        /// `self * b + c` with a single rounding.
        #[inline(always)]
        pub fn mul_add(self, b: V8, c: V8) -> V8 {
            let mut out = [0.0; LANES];
            for j in 0..LANES {
                out[j] = self.0[j].mul_add(b.0[j], c.0[j]);
            }
            V8(out)
        }
        /// `c - self * b` with a single rounding.
        #[inline(always)]
        pub fn neg_mul_add(self, b: V8, c: V8) -> V8 {
            let mut out = [0.0; LANES];
            for j in 0..LANES {
                out[j] = (-self.0[j]).mul_add(b.0[j], c.0[j]);
            }
            V8(out)
        }
        #[inline(always)]
        pub fn add(self, b: V8) -> V8 {
            map2(self, b, |x, y| x + y)
        }
        #[inline(always)]
        pub fn sub(self, b: V8) -> V8 {
            map2(self, b, |x, y| x - y)
        }
        #[inline(always)]
        pub fn mul(self, b: V8) -> V8 {
            map2(self, b, |x, y| x * y)
        }
        /// Lane-wise `if self > b { self } else { b }`.
        #[inline(always)]
        pub fn max(self, b: V8) -> V8 {
            map2(self, b, |x, y| if x > y { x } else { y })
        }
        #[inline(always)]
        pub fn exp_nonpos(self) -> V8 {
            let mut out = self.0;
            for v in &mut out {
                *v = exp_nonpos(*v);
            }
            V8(out)
        }
    }
}

pub(crate) use imp::V8;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fastmath::exp_nonpos;

    #[test]
    fn vector_exp_matches_scalar_bits() {
        let xs: Vec<f64> = (0..800).map(|i| -(i as f64) * 0.917 - 0.003 * i as f64).collect();
        for (c, chunk) in xs.chunks_exact(LANES).enumerate() {
            let got = V8::load(chunk, 0).exp_nonpos().to_array();
            for (j, (&x, g)) in chunk.iter().zip(got).enumerate() {
                assert_eq!(g.to_bits(), exp_nonpos(x).to_bits(), "chunk {c} lane {j} x={x}");
            }
        }
        let nan = V8::splat(f64::NAN).exp_nonpos().to_array();
        assert!(nan.iter().all(|v| v.is_nan()));
    }

    #[test]
    fn max_prefers_left_only_when_greater() {
        let a = V8::splat(1.0).max(V8::splat(2.0)).to_array();
        assert_eq!(a, [2.0; LANES]);
        let z = V8::splat(-0.0).max(V8::splat(0.0)).to_array();
        assert!(z.iter().all(|v| v.to_bits() == 0.0f64.to_bits()));
    }
}
