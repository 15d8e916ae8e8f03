//! Binary Merkle accumulator over pending promises.
//!
//! Leaves are hashed as `H(0x00 || leaf)`, interior nodes as
//! `H(0x01 || left || right)`. A level with an odd number of nodes pairs its
//! last node with itself. The empty tree has the all-zero root.

use serde::{Deserialize, Serialize};

use super::digest::{sha256_parts, Digest};

const LEAF_PREFIX: [u8; 1] = [0x00];
const NODE_PREFIX: [u8; 1] = [0x01];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MerkleProof {
    pub leaf_index: u64,
    pub siblings: Vec<Digest>,
}

pub fn hash_leaf(leaf: &Digest) -> Digest {
    sha256_parts(&[&LEAF_PREFIX, leaf.as_bytes()])
}

pub fn hash_node(left: &Digest, right: &Digest) -> Digest {
    sha256_parts(&[&NODE_PREFIX, left.as_bytes(), right.as_bytes()])
}

fn next_level(level: &[Digest]) -> Vec<Digest> {
    level
        .chunks(2)
        .map(|pair| match pair {
            [l, r] => hash_node(l, r),
            [only] => hash_node(only, only),
            _ => unreachable!(),
        })
        .collect()
}

pub fn merkle_root(leaves: &[Digest]) -> Digest {
    if leaves.is_empty() {
        return Digest::ZERO;
    }
    let mut level: Vec<Digest> = leaves.iter().map(hash_leaf).collect();
    while level.len() > 1 {
        level = next_level(&level);
    }
    level[0]
}

/// Inclusion proof for `leaves[index]`, or `None` when out of range.
pub fn merkle_prove(leaves: &[Digest], index: usize) -> Option<MerkleProof> {
    if index >= leaves.len() {
        return None;
    }
    let mut siblings = Vec::new();
    let mut level: Vec<Digest> = leaves.iter().map(hash_leaf).collect();
    let mut pos = index;
    while level.len() > 1 {
        let sibling = if pos.is_multiple_of(2) {
            *level.get(pos + 1).unwrap_or(&level[pos])
        } else {
            level[pos - 1]
        };
        siblings.push(sibling);
        level = next_level(&level);
        pos /= 2;
    }
    Some(MerkleProof { leaf_index: index as u64, siblings })
}

pub fn merkle_verify(root: &Digest, leaf: &Digest, proof: &MerkleProof) -> bool {
    if proof.siblings.len() >= 64 || proof.leaf_index >> proof.siblings.len() != 0 {
        return false;
    }
    let mut acc = hash_leaf(leaf);
    for (level, sibling) in proof.siblings.iter().enumerate() {
        acc = if (proof.leaf_index >> level) & 1 == 0 {
            hash_node(&acc, sibling)
        } else {
            hash_node(sibling, &acc)
        };
    }
    acc == *root
}
