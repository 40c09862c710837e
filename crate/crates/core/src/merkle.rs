//! Binary SHA-256 hash tree with inclusion proofs.
//!
//! Leaves are `sha256(payload)`, internal nodes are `sha256(left || right)`.
//! Whenever a level has an odd number of nodes the last one is paired with
//! itself, at every level including the leaf level. A single-leaf tree
//! therefore still has one internal level: `root = H(H(L1) || H(L1))`.
//!
//! Proof wire format (bit-exact):
//!
//! ```text
//! leaf_index: u32 big-endian
//! repeated:   sibling digest (32 bytes) || side (0x00 = sibling on the left,
//!                                                0x01 = sibling on the right)
//! ```

use std::fmt;

use sha2::{Digest as _, Sha256};

/// Length in bytes of one serialized proof path element.
pub const PATH_ELEMENT_LEN: usize = 33;
/// Length in bytes of the serialized leaf index prefix.
pub const INDEX_PREFIX_LEN: usize = 4;

#[derive(thiserror::Error, Debug, Clone, PartialEq, Eq)]
pub enum MerkleError {
    #[error("cannot build a merkle tree from an empty leaf set")]
    EmptyLeafSet,
    #[error("leaf index {index} out of range for tree with {leaves} leaves")]
    IndexOutOfRange { index: usize, leaves: usize },
    #[error("malformed proof encoding: {0}")]
    MalformedProof(&'static str),
    #[error("invalid digest: {0}")]
    InvalidDigest(String),
}

/// A 32-byte SHA-256 output.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest([u8; 32]);

impl Digest {
    /// All-zero digest, reserved to mean "no predecessor".
    pub const ZERO: Digest = Digest([0u8; 32]);
    pub const LEN: usize = 32;

    pub const fn from_bytes(bytes: [u8; 32]) -> Self {
        Digest(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0 == [0u8; 32]
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, MerkleError> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out).map_err(|e| MerkleError::InvalidDigest(e.to_string()))?;
        Ok(Digest(out))
    }

    /// Copy with one bit inverted. Used by tamper tooling and tests.
    pub fn with_bit_flipped(mut self, bit: usize) -> Self {
        let bit = bit % 256;
        self.0[bit / 8] ^= 1 << (bit % 8);
        self
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &self.to_hex()[..16])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl AsRef<[u8]> for Digest {
    fn as_ref(&self) -> &[u8] {
        &self.0
    }
}

/// `sha256(data)`.
pub fn hash_bytes(data: &[u8]) -> Digest {
    Digest(Sha256::digest(data).into())
}

/// `sha256(left || right)`.
pub fn hash_pair(left: &Digest, right: &Digest) -> Digest {
    let mut hasher = Sha256::new();
    hasher.update(left.0);
    hasher.update(right.0);
    Digest(hasher.finalize().into())
}

/// Which side of the running node a proof sibling sits on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    fn to_byte(self) -> u8 {
        match self {
            Side::Left => 0x00,
            Side::Right => 0x01,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0x00 => Some(Side::Left),
            0x01 => Some(Side::Right),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MerkleTree {
    /// `levels[0]` are the leaf digests, the last level holds only the root.
    levels: Vec<Vec<Digest>>,
}

impl MerkleTree {
    /// Hashes every payload into a leaf and reduces pairwise up to the root.
    pub fn build<T: AsRef<[u8]>>(payloads: &[T]) -> Result<Self, MerkleError> {
        let leaves: Vec<Digest> = payloads.iter().map(|p| hash_bytes(p.as_ref())).collect();
        Self::from_leaf_digests(leaves)
    }

    /// Builds from already-hashed leaves.
    pub fn from_leaf_digests(leaves: Vec<Digest>) -> Result<Self, MerkleError> {
        if leaves.is_empty() {
            return Err(MerkleError::EmptyLeafSet);
        }
        let mut levels = vec![leaves];
        // A lone leaf is still paired with itself once.
        while levels.len() == 1 || levels.last().map_or(0, Vec::len) > 1 {
            let below = levels.last().expect("at least one level");
            let next = below
                .chunks(2)
                .map(|pair| hash_pair(&pair[0], pair.get(1).unwrap_or(&pair[0])))
                .collect();
            levels.push(next);
        }
        Ok(MerkleTree { levels })
    }

    pub fn root(&self) -> Digest {
        self.levels.last().expect("tree is never empty")[0]
    }

    pub fn leaves(&self) -> &[Digest] {
        &self.levels[0]
    }

    pub fn levels(&self) -> &[Vec<Digest>] {
        &self.levels
    }

    pub fn leaf_count(&self) -> usize {
        self.levels[0].len()
    }

    /// Sibling path from leaf `leaf_index` up to (not including) the root.
    pub fn prove(&self, leaf_index: usize) -> Result<MerkleProof, MerkleError> {
        let leaves = self.leaf_count();
        if leaf_index >= leaves {
            return Err(MerkleError::IndexOutOfRange { index: leaf_index, leaves });
        }
        let leaf_index_u32 = u32::try_from(leaf_index)
            .map_err(|_| MerkleError::IndexOutOfRange { index: leaf_index, leaves })?;

        let mut path = Vec::with_capacity(self.levels.len() - 1);
        let mut idx = leaf_index;
        for level in &self.levels[..self.levels.len() - 1] {
            let step = if idx.is_multiple_of(2) {
                // Odd tail: the node is its own sibling.
                let sib = level.get(idx + 1).unwrap_or(&level[idx]);
                (*sib, Side::Right)
            } else {
                (level[idx - 1], Side::Left)
            };
            path.push(step);
            idx /= 2;
        }
        Ok(MerkleProof { leaf_index: leaf_index_u32, path })
    }
}

/// Convenience: root over `payloads`.
pub fn merkle_root<T: AsRef<[u8]>>(payloads: &[T]) -> Result<Digest, MerkleError> {
    MerkleTree::build(payloads).map(|t| t.root())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MerkleProof {
    pub leaf_index: u32,
    pub path: Vec<(Digest, Side)>,
}

impl MerkleProof {
    pub fn encoded_len(&self) -> usize {
        INDEX_PREFIX_LEN + self.path.len() * PATH_ELEMENT_LEN
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&self.leaf_index.to_be_bytes());
        for (sib, side) in &self.path {
            out.extend_from_slice(sib.as_bytes());
            out.push(side.to_byte());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, MerkleError> {
        if bytes.len() < INDEX_PREFIX_LEN {
            return Err(MerkleError::MalformedProof("missing leaf index"));
        }
        let (head, rest) = bytes.split_at(INDEX_PREFIX_LEN);
        if rest.len() % PATH_ELEMENT_LEN != 0 {
            return Err(MerkleError::MalformedProof("path is not a multiple of 33 bytes"));
        }
        let leaf_index = u32::from_be_bytes(head.try_into().expect("4 bytes"));
        let path = rest
            .chunks_exact(PATH_ELEMENT_LEN)
            .map(|chunk| {
                let side = Side::from_byte(chunk[32]).ok_or(MerkleError::MalformedProof("bad side byte"))?;
                let digest: [u8; 32] = chunk[..32].try_into().expect("32 bytes");
                Ok((Digest(digest), side))
            })
            .collect::<Result<_, _>>()?;
        Ok(MerkleProof { leaf_index, path })
    }
}

/// True iff folding `hash(leaf_payload)` through the proof path yields `root`.
///
/// The sides recorded in the path must agree with the bits of `leaf_index`;
/// a path that contradicts its own index is rejected rather than replayed.
pub fn verify(leaf_payload: &[u8], proof: &MerkleProof, root: &Digest) -> bool {
    if proof.path.is_empty() {
        return false;
    }
    let mut acc = hash_bytes(leaf_payload);
    let mut idx = u64::from(proof.leaf_index);
    for (sib, side) in &proof.path {
        let expected = if idx % 2 == 0 { Side::Right } else { Side::Left };
        if *side != expected {
            return false;
        }
        acc = match side {
            Side::Right => hash_pair(&acc, sib),
            Side::Left => hash_pair(sib, &acc),
        };
        idx /= 2;
    }
    // Leftover index bits mean the path is too short for this leaf.
    idx == 0 && acc == *root
}
