//! Branch-free conditional select and swap.
//!
//! Every oblivious algorithm in this crate funnels its data-dependent choices
//! through [`o_select`] and [`o_swap`]. On x86-64 they compile to `cmovnz`
//! through inline assembly so the optimiser cannot reintroduce a branch; on
//! other targets a full-width mask is used, with the condition laundered
//! through [`std::hint::black_box`].
//!
//! Convention: `o_select(cond, on_true, on_false)` yields `on_true` iff
//! `cond`.

use std::fmt;

/// Index value reserved for dummy cells. Sorts after every real index.
pub const SENTINEL_INDEX: u32 = u32::MAX;

/// A 64-bit opaque word, usually a packed `(index, value)` gradient cell.
///
/// High 32 bits hold the index, low 32 bits the IEEE-754 bit pattern of the
/// value, so one select moves a whole cell and comparing `bits >> 32`
/// compares indices.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
#[repr(transparent)]
pub struct CtWord(pub u64);

impl CtWord {
    /// The dummy cell `(MAX, 0.0)`.
    pub const SENTINEL: CtWord = CtWord((SENTINEL_INDEX as u64) << 32);

    #[inline(always)]
    pub fn pack(index: u32, value: f32) -> Self {
        CtWord(((index as u64) << 32) | value.to_bits() as u64)
    }

    #[inline(always)]
    pub fn unpack(self) -> (u32, f32) {
        (self.index(), self.value())
    }

    #[inline(always)]
    pub fn index(self) -> u32 {
        (self.0 >> 32) as u32
    }

    #[inline(always)]
    pub fn value(self) -> f32 {
        f32::from_bits(self.0 as u32)
    }

    /// A word carrying only a float in the low half (index 0).
    #[inline(always)]
    pub fn from_f32(value: f32) -> Self {
        CtWord(value.to_bits() as u64)
    }

    #[inline(always)]
    pub fn bits(self) -> u64 {
        self.0
    }

    #[inline(always)]
    pub fn is_sentinel(self) -> bool {
        self.index() == SENTINEL_INDEX
    }
}

impl fmt::Debug for CtWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CtWord({}, {})", self.index(), self.value())
    }
}

impl From<(u32, f32)> for CtWord {
    fn from((index, value): (u32, f32)) -> Self {
        CtWord::pack(index, value)
    }
}

/// Returns `on_true` iff `cond`, without a data-dependent branch.
#[inline(always)]
pub fn o_select(cond: bool, on_true: CtWord, on_false: CtWord) -> CtWord {
    CtWord(o_select_u64(cond, on_true.0, on_false.0))
}

/// Returns `(b, a)` iff `cond`, else `(a, b)`, without a data-dependent branch.
#[inline(always)]
pub fn o_swap(cond: bool, a: CtWord, b: CtWord) -> (CtWord, CtWord) {
    let (x, y) = o_swap_u64(cond, a.0, b.0);
    (CtWord(x), CtWord(y))
}

#[inline(always)]
pub fn o_select_f32(cond: bool, on_true: f32, on_false: f32) -> f32 {
    f32::from_bits(o_select_u64(cond, on_true.to_bits() as u64, on_false.to_bits() as u64) as u32)
}

#[inline(always)]
pub fn o_select_u32(cond: bool, on_true: u32, on_false: u32) -> u32 {
    o_select_u64(cond, on_true as u64, on_false as u64) as u32
}

#[cfg(target_arch = "x86_64")]
#[inline(always)]
pub fn o_select_u64(cond: bool, on_true: u64, on_false: u64) -> u64 {
    let mut out = on_false;
    // SAFETY: register-only cmov, no memory access.
    unsafe {
        std::arch::asm!(
            "test {c}, {c}",
            "cmovnz {o}, {t}",
            c = in(reg) cond as u64,
            t = in(reg) on_true,
            o = inout(reg) out,
            options(pure, nomem, nostack),
        );
    }
    out
}

#[cfg(target_arch = "x86_64")]
#[inline(always)]
pub fn o_swap_u64(cond: bool, a: u64, b: u64) -> (u64, u64) {
    let mut x = a;
    let mut y = b;
    // SAFETY: register-only cmovs, no memory access.
    unsafe {
        std::arch::asm!(
            "test {c}, {c}",
            "cmovnz {x}, {b}",
            "cmovnz {y}, {a}",
            c = in(reg) cond as u64,
            a = in(reg) a,
            b = in(reg) b,
            x = inout(reg) x,
            y = inout(reg) y,
            options(pure, nomem, nostack),
        );
    }
    (x, y)
}

#[cfg(not(target_arch = "x86_64"))]
#[inline(always)]
pub fn o_select_u64(cond: bool, on_true: u64, on_false: u64) -> u64 {
    let mask = 0u64.wrapping_sub(std::hint::black_box(cond as u64));
    (on_true & mask) | (on_false & !mask)
}

#[cfg(not(target_arch = "x86_64"))]
#[inline(always)]
pub fn o_swap_u64(cond: bool, a: u64, b: u64) -> (u64, u64) {
    let mask = 0u64.wrapping_sub(std::hint::black_box(cond as u64));
    let t = (a ^ b) & mask;
    (a ^ t, b ^ t)
}

/// `a == b` computed arithmetically.
#[inline(always)]
pub fn ct_eq_u32(a: u32, b: u32) -> bool {
    let x = (a ^ b) as u64;
    // x == 0 iff (x - 1) borrows into bit 63.
    (x.wrapping_sub(1) >> 63) != 0
}

/// `a > b` computed arithmetically.
#[inline(always)]
pub fn ct_gt_u32(a: u32, b: u32) -> bool {
    ((b as u64).wrapping_sub(a as u64) >> 63) != 0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn select_and_swap_examples() {
        assert_eq!(o_select(true, CtWord(7), CtWord(9)), CtWord(7));
        assert_eq!(o_select(false, CtWord(7), CtWord(9)), CtWord(9));
        assert_eq!(o_swap(true, CtWord(1), CtWord(2)), (CtWord(2), CtWord(1)));
        assert_eq!(o_swap(false, CtWord(1), CtWord(2)), (CtWord(1), CtWord(2)));
    }

    #[test]
    fn agrees_with_branching_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let a = CtWord(rng.gen());
            let b = CtWord(rng.gen());
            for cond in [false, true] {
                let want = if cond { a } else { b };
                assert_eq!(o_select(cond, a, b), want);
                let want_swap = if cond { (b, a) } else { (a, b) };
                assert_eq!(o_swap(cond, a, b), want_swap);
            }
            assert_eq!(o_select(rng.gen(), a, a), a);
        }
    }

    #[test]
    fn comparisons_match_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let edge = [0u32, 1, u32::MAX - 1, u32::MAX];
        for &a in &edge {
            for &b in &edge {
                assert_eq!(ct_eq_u32(a, b), a == b);
                assert_eq!(ct_gt_u32(a, b), a > b);
            }
        }
        for _ in 0..10_000 {
            let (a, b): (u32, u32) = (rng.gen(), rng.gen());
            assert_eq!(ct_eq_u32(a, b), a == b);
            assert_eq!(ct_gt_u32(a, b), a > b);
        }
    }

    #[test]
    fn packing_layout() {
        let w = CtWord::pack(3, 1.5);
        assert_eq!(w.0 >> 32, 3);
        assert_eq!(w.0 as u32, 1.5f32.to_bits());
        assert!(CtWord::SENTINEL.is_sentinel());
        assert_eq!(CtWord::SENTINEL.value(), 0.0);
    }

    // Audit: the select/swap bodies must not branch on the condition.
    #[test]
    fn select_core_has_no_branches() {
        let src = include_str!("primitives.rs");
        for name in ["\npub fn o_select_u64", "\npub fn o_swap_u64"] {
            for (start, _) in src.match_indices(name) {
                let body_start = start + src[start..].find('{').unwrap();
                let body_end = body_start + src[body_start..].find("\n}\n").unwrap();
                let body = &src[body_start..body_end];
                for banned in ["if ", "match ", "&&", "||", "jz", "jnz", "je ", "jne"] {
                    assert!(!body.contains(banned), "{name} contains `{banned}`");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn pack_unpack_roundtrip(bits in any::<u64>()) {
            let w = CtWord(bits);
            let (i, v) = w.unpack();
            prop_assert_eq!(CtWord::pack(i, v), w);
        }

        #[test]
        fn swap_is_involution(c in any::<bool>(), a in any::<u64>(), b in any::<u64>()) {
            let (x, y) = o_swap(c, CtWord(a), CtWord(b));
            prop_assert_eq!(o_swap(c, x, y), (CtWord(a), CtWord(b)));
        }
    }
}
