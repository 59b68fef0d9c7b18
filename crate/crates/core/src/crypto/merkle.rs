use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use super::{CryptoError, Digest};

const LEAF_PREFIX: u8 = 0x00;
const NODE_PREFIX: u8 = 0x01;

/// Inclusion proof for one leaf; siblings are ordered bottom-up.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MerkleProof {
    pub leaf_index: u32,
    pub siblings: Vec<Digest>,
}

fn leaf_hash(leaf: &Digest) -> Digest {
    let mut h = Sha256::new();
    h.update([LEAF_PREFIX]);
    h.update(leaf.0);
    Digest(h.finalize().into())
}

fn node_hash(left: &Digest, right: &Digest) -> Digest {
    let mut h = Sha256::new();
    h.update([NODE_PREFIX]);
    h.update(left.0);
    h.update(right.0);
    Digest(h.finalize().into())
}

/// All levels of the tree, leaves (hashed and padded) first, root last.
fn levels(leaves: &[Digest]) -> Result<Vec<Vec<Digest>>, CryptoError> {
    let last = leaves.last().ok_or(CryptoError::EmptyTree)?;
    let width = leaves.len().next_power_of_two();
    let mut level: Vec<Digest> = leaves.iter().chain(std::iter::repeat(last).take(width - leaves.len())).map(leaf_hash).collect();
    let mut out = Vec::with_capacity(width.trailing_zeros() as usize + 1);
    while level.len() > 1 {
        let next = level.chunks_exact(2).map(|pair| node_hash(&pair[0], &pair[1])).collect();
        out.push(std::mem::replace(&mut level, next));
    }
    out.push(level);
    Ok(out)
}

pub fn merkle_root(leaves: &[Digest]) -> Result<Digest, CryptoError> {
    Ok(levels(leaves)?.last().expect("root level")[0])
}

pub fn merkle_prove(leaves: &[Digest], index: usize) -> Result<MerkleProof, CryptoError> {
    if index >= leaves.len() {
        return Err(CryptoError::IndexOutOfRange { index, leaves: leaves.len() });
    }
    let levels = levels(leaves)?;
    let mut pos = index;
    let siblings = levels[..levels.len() - 1]
        .iter()
        .map(|level| {
            let sibling = level[pos ^ 1];
            pos >>= 1;
            sibling
        })
        .collect();
    Ok(MerkleProof { leaf_index: index as u32, siblings })
}

pub fn merkle_verify(root: &Digest, leaf: &Digest, proof: &MerkleProof) -> bool {
    if proof.siblings.len() >= 32 {
        return false;
    }
    let mut pos = proof.leaf_index;
    let mut node = leaf_hash(leaf);
    for sibling in &proof.siblings {
        node = if pos & 1 == 0 { node_hash(&node, sibling) } else { node_hash(sibling, &node) };
        pos >>= 1;
    }
    // Index bits beyond the tree height would name a leaf that does not exist.
    pos == 0 && node == *root
}
