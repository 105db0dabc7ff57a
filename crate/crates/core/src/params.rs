//! Named parameter trees.
//!
//! Parameter records are generic over their leaf type so the same structure
//! holds stored tensors (`Tensor<T>`), tape handles (`Var`) during a
//! forward/backward pass, or optimizer state.

use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub trait ParamTree<P> {
    type Mapped<Q>;

    /// Rebuilds the tree with every leaf replaced by `f(path, leaf)`.
    /// Leaves are visited in a fixed order.
    fn map_named<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Self::Mapped<Q>;

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// A lone tensor is a tree with one leaf named by the prefix.
impl<T: Scalar> ParamTree<Tensor<T>> for Tensor<T> {
    type Mapped<Q> = Q;

    fn map_named<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>) -> Q) -> Q {
        f(prefix, self)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(prefix, self)
    }
}

/// Pairs visit the first tree, then the second.
impl<P, A: ParamTree<P>, B: ParamTree<P>> ParamTree<P> for (A, B) {
    type Mapped<Q> = (A::Mapped<Q>, B::Mapped<Q>);

    fn map_named<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Self::Mapped<Q> {
        let a = self.0.map_named(&join(prefix, "0"), f);
        (a, self.1.map_named(&join(prefix, "1"), f))
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        self.0.visit_mut(&join(prefix, "0"), f);
        self.1.visit_mut(&join(prefix, "1"), f);
    }
}

/// Visits leaves in order without mutation.
pub fn for_each_leaf<P, R: ParamTree<P>>(tree: &R, mut f: impl FnMut(&str, &P)) {
    let _ = tree.map_named("", &mut |name, p| f(name, p));
}

/// Total scalar count of a stored tree.
pub fn scalar_count<T: Scalar, R: ParamTree<Tensor<T>>>(tree: &R) -> usize {
    let mut n = 0;
    for_each_leaf(tree, |_, t| n += t.len());
    n
}

/// Registers every tensor as a trainable leaf on `tape`.
pub fn register<T: Scalar, R: ParamTree<Tensor<T>>>(tape: &mut Tape<T>, tree: &R) -> R::Mapped<Var> {
    tree.map_named("", &mut |_, t| tape.leaf(t.clone()))
}

/// Collects `(path, leaf)` pairs in visiting order.
pub fn flatten<P: Clone, R: ParamTree<P>>(tree: &R) -> Vec<(String, P)> {
    let mut out = Vec::new();
    for_each_leaf(tree, |name, p| out.push((name.to_string(), p.clone())));
    out
}

/// Implements [`ParamTree`] for a struct generic over its leaf type.
///
/// `leaves` are fields of type `P`, `trees` are nested trees, `seqs` are
/// `Vec`s of nested trees and `copy` are structural fields cloned as-is.
/// Leaves are visited in that order.
macro_rules! param_tree {
    ($name:ident { leaves: [$($leaf:ident),*], trees: [$($tree:ident),*], seqs: [$($seq:ident),*], copy: [$($copy:ident),*] }) => {
        impl<P> $crate::params::ParamTree<P> for $name<P> {
            type Mapped<Q> = $name<Q>;

            fn map_named<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> $name<Q> {
                #[allow(unused_imports)]
                use $crate::params::{join, ParamTree};
                $name {
                    $($leaf: f(&join(prefix, stringify!($leaf)), &self.$leaf),)*
                    $($tree: self.$tree.map_named(&join(prefix, stringify!($tree)), f),)*
                    $($seq: self.$seq.iter().enumerate()
                        .map(|(i, t)| t.map_named(&join(&join(prefix, stringify!($seq)), &i.to_string()), f))
                        .collect(),)*
                    $($copy: self.$copy.clone(),)*
                }
            }

            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
                #[allow(unused_imports)]
                use $crate::params::{join, ParamTree};
                $(f(&join(prefix, stringify!($leaf)), &mut self.$leaf);)*
                $(self.$tree.visit_mut(&join(prefix, stringify!($tree)), f);)*
                $(for (i, t) in self.$seq.iter_mut().enumerate() {
                    t.visit_mut(&join(&join(prefix, stringify!($seq)), &i.to_string()), f);
                })*
            }
        }
    };
}

pub(crate) use param_tree;
