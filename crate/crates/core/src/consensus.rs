//! Bootstrap consensus: a three-phase PBFT vote among a static gateway set
//! that admits one new device block per instance.
//!
//! Every instance is identified by the device public key being admitted.
//! The proposer broadcasts a signed `PRE_PREPARE` carrying the header;
//! peers answer with `PREPARE` votes, then `COMMIT` votes once a quorum of
//! prepares is seen, and decide once a quorum of commits is seen. The
//! commit signatures become the block's consensus certificate, so the
//! ledger itself proves the agreement after the fact.
//!
//! There is no view change: a failed instance times out at the gateway
//! layer and the camera retries its hello with a fresh instance.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::encoding::{DecodeError, DecodeErrorKind, FieldDecoder, FieldEncoder};
use crate::identity::{self, DeviceIdentity, IdentityError, PublicKey, Signature};
use crate::ledger::{codec, BlockHeader, CertificateEntry};

/// Static cluster membership. Tolerates `max_faulty` byzantine peers out
/// of `peers.len()`, requiring `n >= 3f + 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConsensusConfig {
    peers: Vec<PublicKey>,
    max_faulty: usize,
}

impl ConsensusConfig {
    pub fn new(peers: Vec<PublicKey>, max_faulty: usize) -> Result<Self, ConsensusError> {
        if peers.len() < 3 * max_faulty + 1 {
            return Err(ConsensusError::ConfigInvalid {
                peers: peers.len(),
                max_faulty,
            });
        }
        let mut seen = peers.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != peers.len() {
            return Err(ConsensusError::DuplicatePeer);
        }
        Ok(Self { peers, max_faulty })
    }

    pub fn peers(&self) -> &[PublicKey] {
        &self.peers
    }

    pub fn max_faulty(&self) -> usize {
        self.max_faulty
    }

    /// Votes needed for any quorum: `2f + 1`.
    pub fn quorum(&self) -> usize {
        2 * self.max_faulty + 1
    }

    pub fn contains(&self, key: &PublicKey) -> bool {
        self.peers.contains(key)
    }

    pub fn peer_index(&self, key: &PublicKey) -> Option<usize> {
        self.peers.iter().position(|p| p == key)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Phase {
    PrePrepare = 0,
    Prepare = 1,
    Commit = 2,
}

impl Phase {
    fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Self::PrePrepare),
            1 => Some(Self::Prepare),
            2 => Some(Self::Commit),
            _ => None,
        }
    }
}

/// The bytes a consensus vote signs: `(phase, header_hash)` in canonical
/// field encoding.
pub fn vote_signing_bytes(phase: Phase, header_hash: &[u8; 32]) -> Vec<u8> {
    let mut enc = FieldEncoder::with_capacity(48);
    enc.put_u8(phase as u8).put_bytes(header_hash);
    enc.finish()
}

/// Signs a commit vote; also used when re-verifying certificates.
pub fn sign_commit(
    header_hash: &[u8; 32],
    gateway: &DeviceIdentity,
) -> Result<Signature, IdentityError> {
    gateway.sign(&vote_signing_bytes(Phase::Commit, header_hash))
}

/// Checks one certificate entry: a commit vote over `header_hash`.
pub fn verify_commit_entry(header_hash: &[u8; 32], entry: &CertificateEntry) -> bool {
    identity::verify(
        &entry.gateway,
        &vote_signing_bytes(Phase::Commit, header_hash),
        &entry.signature,
    )
}

#[derive(Debug, Error)]
pub enum CertificateError {
    #[error("certificate has {have} valid distinct signatures, quorum is {need}")]
    BelowQuorum { have: usize, need: usize },
    #[error("certificate signer {0} is not a cluster peer")]
    UnknownSigner(PublicKey),
    #[error("certificate contains duplicate signer {0}")]
    DuplicateSigner(PublicKey),
    #[error("certificate signature from {0} does not verify")]
    BadSignature(PublicKey),
}

/// Re-verifies a header's consensus certificate against the cluster:
/// every entry must be a distinct peer's valid commit vote over the
/// recomputed header hash, and there must be at least a quorum of them.
pub fn verify_certificate(
    header: &BlockHeader,
    config: &ConsensusConfig,
) -> Result<(), CertificateError> {
    let hash = header.header_hash();
    let mut seen: Vec<PublicKey> = Vec::new();
    for entry in &header.consensus_certificate {
        if !config.contains(&entry.gateway) {
            return Err(CertificateError::UnknownSigner(entry.gateway));
        }
        if seen.contains(&entry.gateway) {
            return Err(CertificateError::DuplicateSigner(entry.gateway));
        }
        if !verify_commit_entry(&hash, entry) {
            return Err(CertificateError::BadSignature(entry.gateway));
        }
        seen.push(entry.gateway);
    }
    if seen.len() < config.quorum() {
        return Err(CertificateError::BelowQuorum {
            have: seen.len(),
            need: config.quorum(),
        });
    }
    Ok(())
}

/// A signed consensus protocol message. `proposed_header` rides along only
/// on `PRE_PREPARE`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConsensusMessage {
    pub phase: Phase,
    pub header_hash: [u8; 32],
    pub proposed_header: Option<BlockHeader>,
    pub sender: PublicKey,
    pub signature: Signature,
}

impl ConsensusMessage {
    pub fn sign(
        phase: Phase,
        header_hash: [u8; 32],
        proposed_header: Option<BlockHeader>,
        sender: &DeviceIdentity,
    ) -> Result<Self, IdentityError> {
        let signature = sender.sign(&vote_signing_bytes(phase, &header_hash))?;
        Ok(Self {
            phase,
            header_hash,
            proposed_header,
            sender: sender.public_key(),
            signature,
        })
    }

    pub fn verify_signature(&self) -> bool {
        identity::verify(
            &self.sender,
            &vote_signing_bytes(self.phase, &self.header_hash),
            &self.signature,
        )
    }

    pub fn encode_into(&self, enc: &mut FieldEncoder) {
        enc.put_u8(self.phase as u8).put_bytes(&self.header_hash);
        match &self.proposed_header {
            Some(h) => {
                enc.put_u8(1);
                codec::encode_header_into(enc, h);
            }
            None => {
                enc.put_u8(0);
            }
        }
        enc.put_bytes(self.sender.as_bytes())
            .put_bytes(self.signature.as_bytes());
    }

    pub fn decode(dec: &mut FieldDecoder<'_>) -> Result<Self, DecodeError> {
        let at = dec.position();
        let phase = Phase::from_u8(dec.take_u8()?).ok_or(DecodeError {
            offset: at,
            kind: DecodeErrorKind::BadValue("unknown consensus phase".into()),
        })?;
        let header_hash = dec.take_array::<32>()?;
        let proposed_header = match dec.take_u8()? {
            0 => None,
            1 => Some(codec::decode_header(dec)?),
            _ => {
                return Err(DecodeError {
                    offset: at,
                    kind: DecodeErrorKind::BadValue("bad header presence flag".into()),
                })
            }
        };
        let sender = PublicKey::from_bytes(dec.take_array::<32>()?);
        let signature = Signature::from_bytes(dec.take_array::<64>()?);
        Ok(Self {
            phase,
            header_hash,
            proposed_header,
            sender,
            signature,
        })
    }
}

#[derive(Debug, Error)]
pub enum ConsensusError {
    #[error("{peers} peers cannot tolerate {max_faulty} faults (need 3f+1)")]
    ConfigInvalid { peers: usize, max_faulty: usize },
    #[error("duplicate peer key in cluster config")]
    DuplicatePeer,
    #[error("local identity is not a cluster peer")]
    NotAPeer,
    #[error("instance already holds a proposal")]
    DoubleProposal,
    #[error("proposal is for a different device")]
    WrongDevice,
    #[error("proposer must be the header's managing gateway")]
    NotManager,
    #[error(transparent)]
    Identity(#[from] IdentityError),
}

/// What one protocol step produced.
#[derive(Debug, Default)]
pub struct StepOutcome {
    /// Messages to broadcast to all peers.
    pub outbound: Vec<ConsensusMessage>,
    /// The certified header, returned exactly once, on the deciding step.
    pub decided: Option<BlockHeader>,
    /// A valid commit vote arrived after decision; the caller should
    /// refresh the stored block's certificate from `certificate()`.
    pub certificate_grew: bool,
}

/// Single-instance PBFT state machine. All inputs arrive through
/// [`step`](Self::step); the instance never performs I/O.
///
/// Votes are banked per header hash even before a proposal is accepted, so
/// adversarial delivery orders cannot starve a decision.
pub struct ConsensusInstance {
    config: ConsensusConfig,
    device: PublicKey,
    me: DeviceIdentity,
    my_index: usize,
    proposal: Option<BlockHeader>,
    proposal_hash: Option<[u8; 32]>,
    prepare_votes: HashMap<[u8; 32], BTreeMap<usize, Signature>>,
    commit_votes: HashMap<[u8; 32], BTreeMap<usize, Signature>>,
    sent_commit: bool,
    decided: bool,
    rejected: u64,
}

/// Cap on distinct header hashes banked per phase; beyond this the vote is
/// byzantine spam and is dropped.
const MAX_TRACKED_HASHES: usize = 16;

impl ConsensusInstance {
    pub fn new(
        config: ConsensusConfig,
        device: PublicKey,
        me: DeviceIdentity,
    ) -> Result<Self, ConsensusError> {
        let my_index = config.peer_index(&me.public_key()).ok_or(ConsensusError::NotAPeer)?;
        Ok(Self {
            config,
            device,
            me,
            my_index,
            proposal: None,
            proposal_hash: None,
            prepare_votes: HashMap::new(),
            commit_votes: HashMap::new(),
            sent_commit: false,
            decided: false,
            rejected: 0,
        })
    }

    pub fn device(&self) -> PublicKey {
        self.device
    }

    pub fn is_decided(&self) -> bool {
        self.decided
    }

    /// Messages rejected so far (bad signature, unknown sender,
    /// equivocation, spam); kept as byzantine evidence.
    pub fn rejected_count(&self) -> u64 {
        self.rejected
    }

    /// Starts the instance as proposer. Emits the signed `PRE_PREPARE`
    /// plus this node's own `PREPARE`, both for broadcast.
    pub fn propose(
        &mut self,
        header: BlockHeader,
    ) -> Result<Vec<ConsensusMessage>, ConsensusError> {
        if self.proposal.is_some() {
            return Err(ConsensusError::DoubleProposal);
        }
        if header.device_public_key != self.device {
            return Err(ConsensusError::WrongDevice);
        }
        if header.managing_gateway != self.me.public_key() {
            return Err(ConsensusError::NotManager);
        }
        let hash = header.header_hash();
        let pre_prepare = ConsensusMessage::sign(
            Phase::PrePrepare,
            hash,
            Some(header.clone()),
            &self.me,
        )?;
        self.proposal = Some(header);
        self.proposal_hash = Some(hash);
        let prepare = self.cast_own_vote(Phase::Prepare, hash)?;
        let mut out = vec![pre_prepare, prepare];
        // Banked votes may already satisfy a quorum for this hash.
        let mut tail = StepOutcome::default();
        self.progress(&mut tail);
        out.extend(tail.outbound);
        Ok(out)
    }

    /// Feeds one message through the state machine. Invalid or duplicate
    /// messages are counted and ignored, never fatal.
    pub fn step(&mut self, msg: &ConsensusMessage) -> StepOutcome {
        let mut outcome = StepOutcome::default();
        if !self.config.contains(&msg.sender) || !msg.verify_signature() {
            self.rejected += 1;
            return outcome;
        }
        match msg.phase {
            Phase::PrePrepare => self.on_pre_prepare(msg, &mut outcome),
            Phase::Prepare | Phase::Commit => self.on_vote(msg, &mut outcome),
        }
        self.progress(&mut outcome);
        outcome
    }

    fn on_pre_prepare(&mut self, msg: &ConsensusMessage, _outcome: &mut StepOutcome) {
        let Some(header) = &msg.proposed_header else {
            self.rejected += 1;
            return;
        };
        if header.header_hash() != msg.header_hash
            || header.managing_gateway != msg.sender
            || header.device_public_key != self.device
        {
            self.rejected += 1;
            return;
        }
        match self.proposal_hash {
            // Accept exactly one proposal per instance; a second,
            // different header from anyone is equivocation.
            None => {
                self.proposal = Some(header.clone());
                self.proposal_hash = Some(msg.header_hash);
                if let Ok(prepare) = self.cast_own_vote(Phase::Prepare, msg.header_hash) {
                    _outcome.outbound.push(prepare);
                }
            }
            Some(accepted) if accepted == msg.header_hash => {
                // Duplicate of the accepted proposal; nothing to do.
            }
            Some(_) => {
                self.rejected += 1;
            }
        }
    }

    fn on_vote(&mut self, msg: &ConsensusMessage, outcome: &mut StepOutcome) {
        let Some(sender_index) = self.config.peer_index(&msg.sender) else {
            self.rejected += 1;
            return;
        };
        let votes = match msg.phase {
            Phase::Prepare => &mut self.prepare_votes,
            Phase::Commit => &mut self.commit_votes,
            Phase::PrePrepare => unreachable!("routed in step"),
        };
        if !votes.contains_key(&msg.header_hash) && votes.len() >= MAX_TRACKED_HASHES {
            self.rejected += 1;
            return;
        }
        let slot = votes.entry(msg.header_hash).or_default();
        let is_new = slot.insert(sender_index, msg.signature).is_none();
        if !is_new {
            // Duplicate vote from the same sender: set semantics, no change.
            return;
        }
        if self.decided && msg.phase == Phase::Commit && Some(msg.header_hash) == self.proposal_hash
        {
            outcome.certificate_grew = true;
        }
    }

    fn cast_own_vote(
        &mut self,
        phase: Phase,
        hash: [u8; 32],
    ) -> Result<ConsensusMessage, ConsensusError> {
        let msg = ConsensusMessage::sign(phase, hash, None, &self.me)?;
        let votes = match phase {
            Phase::Prepare => &mut self.prepare_votes,
            Phase::Commit => &mut self.commit_votes,
            Phase::PrePrepare => unreachable!("pre-prepare is not a vote"),
        };
        votes.entry(hash).or_default().insert(self.my_index, msg.signature);
        Ok(msg)
    }

    /// Advances through commit emission and decision as quorums fill in.
    fn progress(&mut self, outcome: &mut StepOutcome) {
        let Some(hash) = self.proposal_hash else {
            return;
        };
        let quorum = self.config.quorum();
        if !self.sent_commit
            && self
                .prepare_votes
                .get(&hash)
                .is_some_and(|v| v.len() >= quorum)
        {
            self.sent_commit = true;
            if let Ok(commit) = self.cast_own_vote(Phase::Commit, hash) {
                outcome.outbound.push(commit);
            }
        }
        if !self.decided
            && self
                .commit_votes
                .get(&hash)
                .is_some_and(|v| v.len() >= quorum)
        {
            self.decided = true;
            outcome.decided = Some(self.certified_header().expect("proposal present"));
        }
    }

    /// The accepted header with the currently collected commit certificate,
    /// entries in peer-index order.
    pub fn certified_header(&self) -> Option<BlockHeader> {
        let header = self.proposal.as_ref()?;
        let hash = self.proposal_hash?;
        let mut header = header.clone();
        header.consensus_certificate = self.certificate_for(&hash);
        Some(header)
    }

    pub fn certificate(&self) -> Vec<CertificateEntry> {
        self.proposal_hash
            .map(|h| self.certificate_for(&h))
            .unwrap_or_default()
    }

    fn certificate_for(&self, hash: &[u8; 32]) -> Vec<CertificateEntry> {
        self.commit_votes
            .get(hash)
            .map(|votes| {
                votes
                    .iter()
                    .map(|(&idx, &signature)| CertificateEntry {
                        gateway: self.config.peers[idx],
                        signature,
                    })
                    .collect()
            })
            .unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::ZERO_HASH;

    fn cluster(n: usize, f: usize) -> (Vec<DeviceIdentity>, ConsensusConfig) {
        let ids: Vec<DeviceIdentity> = (0..n).map(|_| DeviceIdentity::generate()).collect();
        let config =
            ConsensusConfig::new(ids.iter().map(|i| i.public_key()).collect(), f).unwrap();
        (ids, config)
    }

    fn header_for(device: PublicKey, proposer: &DeviceIdentity, created_at: u64) -> BlockHeader {
        BlockHeader {
            device_public_key: device,
            previous_header_hash: ZERO_HASH,
            created_at,
            managing_gateway: proposer.public_key(),
            consensus_certificate: Vec::new(),
        }
    }

    #[test]
    fn config_invariants() {
        let (_ids, cfg) = cluster(4, 1);
        assert_eq!(cfg.quorum(), 3);
        let keys: Vec<PublicKey> = (0..3).map(|_| DeviceIdentity::generate().public_key()).collect();
        assert!(matches!(
            ConsensusConfig::new(keys, 1),
            Err(ConsensusError::ConfigInvalid { peers: 3, max_faulty: 1 })
        ));
        let k = DeviceIdentity::generate().public_key();
        assert!(matches!(
            ConsensusConfig::new(vec![k, k, k, k], 1),
            Err(ConsensusError::DuplicatePeer)
        ));
        // f = 0 single-gateway cluster is legal.
        assert!(ConsensusConfig::new(vec![k], 0).is_ok());
    }

    #[test]
    fn propose_emits_signed_pre_prepare_and_prepare() {
        let (ids, cfg) = cluster(4, 1);
        let device = DeviceIdentity::generate().public_key();
        let mut inst = ConsensusInstance::new(cfg, device, ids[0].clone()).unwrap();
        let msgs = inst.propose(header_for(device, &ids[0], 1)).unwrap();
        assert_eq!(msgs.len(), 2);
        assert_eq!(msgs[0].phase, Phase::PrePrepare);
        assert!(msgs[0].proposed_header.is_some());
        assert_eq!(msgs[1].phase, Phase::Prepare);
        assert!(msgs.iter().all(|m| m.verify_signature()));
        assert!(msgs.iter().all(|m| m.sender == ids[0].public_key()));
    }

    #[test]
    fn double_propose_rejected() {
        let (ids, cfg) = cluster(4, 1);
        let device = DeviceIdentity::generate().public_key();
        let mut inst = ConsensusInstance::new(cfg, device, ids[0].clone()).unwrap();
        inst.propose(header_for(device, &ids[0], 1)).unwrap();
        assert!(matches!(
            inst.propose(header_for(device, &ids[0], 2)),
            Err(ConsensusError::DoubleProposal)
        ));
    }

    #[test]
    fn four_honest_nodes_all_decide_same_header() {
        let (ids, cfg) = cluster(4, 1);
        let device = DeviceIdentity::generate().public_key();
        let mut nodes: Vec<ConsensusInstance> = ids
            .iter()
            .map(|id| ConsensusInstance::new(cfg.clone(), device, id.clone()).unwrap())
            .collect();

        let mut queue = nodes[0].propose(header_for(device, &ids[0], 1)).unwrap();
        let mut decided: Vec<Option<BlockHeader>> = vec![None; 4];
        // Proposer's broadcast reaches everyone; each outbound message is
        // delivered to every other node until the network drains.
        let mut deliveries: Vec<(usize, ConsensusMessage)> = queue
            .drain(..)
            .flat_map(|m| (0..4).filter(move |&i| i != 0).map(move |i| (i, m.clone())))
            .collect();
        while let Some((to, msg)) = deliveries.pop() {
            let from = to;
            let outcome = nodes[to].step(&msg);
            if let Some(h) = outcome.decided {
                assert!(decided[to].is_none(), "decided exactly once");
                decided[to] = Some(h);
            }
            for m in outcome.outbound {
                for i in 0..4 {
                    if i != from {
                        deliveries.push((i, m.clone()));
                    }
                }
            }
        }
        // The proposer also decides from the votes echoed back to it.
        let hashes: Vec<[u8; 32]> = decided
            .iter()
            .flatten()
            .map(|h| h.header_hash())
            .collect();
        assert_eq!(hashes.len(), 4, "all four nodes decide");
        assert!(hashes.windows(2).all(|w| w[0] == w[1]));
        for h in decided.iter().flatten() {
            assert!(h.consensus_certificate.len() >= cfg.quorum());
            verify_certificate(h, &cfg).unwrap();
        }
    }

    #[test]
    fn duplicate_prepare_does_not_double_count() {
        let (ids, cfg) = cluster(4, 1);
        let device = DeviceIdentity::generate().public_key();
        let header = header_for(device, &ids[0], 1);
        let hash = header.header_hash();
        let mut node = ConsensusInstance::new(cfg, device, ids[1].clone()).unwrap();

        let pre = ConsensusMessage::sign(Phase::PrePrepare, hash, Some(header), &ids[0]).unwrap();
        node.step(&pre);
        let prep2 = ConsensusMessage::sign(Phase::Prepare, hash, None, &ids[2]).unwrap();
        // Same vote three times: still only (own + proposer-less) two
        // prepares counted, so no commit goes out.
        let mut all_out = Vec::new();
        for _ in 0..3 {
            all_out.extend(node.step(&prep2).outbound);
        }
        assert!(all_out.is_empty());
        // A third distinct prepare crosses the quorum and yields a commit.
        let prep3 = ConsensusMessage::sign(Phase::Prepare, hash, None, &ids[3]).unwrap();
        let out = node.step(&prep3).outbound;
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].phase, Phase::Commit);
    }

    #[test]
    fn unknown_sender_and_bad_signature_rejected() {
        let (ids, cfg) = cluster(4, 1);
        let device = DeviceIdentity::generate().public_key();
        let mut node = ConsensusInstance::new(cfg, device, ids[1].clone()).unwrap();

        let outsider = DeviceIdentity::generate();
        let msg = ConsensusMessage::sign(Phase::Prepare, [1; 32], None, &outsider).unwrap();
        node.step(&msg);
        assert_eq!(node.rejected_count(), 1);

        let mut forged = ConsensusMessage::sign(Phase::Prepare, [1; 32], None, &ids[2]).unwrap();
        forged.header_hash = [2; 32]; // signature no longer matches
        node.step(&forged);
        assert_eq!(node.rejected_count(), 2);
    }

    #[test]
    fn votes_arriving_before_proposal_still_decide() {
        let (ids, cfg) = cluster(4, 1);
        let device = DeviceIdentity::generate().public_key();
        let header = header_for(device, &ids[0], 1);
        let hash = header.header_hash();
        let mut node = ConsensusInstance::new(cfg.clone(), device, ids[1].clone()).unwrap();

        for id in &ids[2..4] {
            node.step(&ConsensusMessage::sign(Phase::Prepare, hash, None, id).unwrap());
        }
        for id in [&ids[0], &ids[2], &ids[3]] {
            node.step(&ConsensusMessage::sign(Phase::Commit, hash, None, id).unwrap());
        }
        assert!(!node.is_decided());
        // The late PRE_PREPARE unlocks everything at once.
        let pre = ConsensusMessage::sign(Phase::PrePrepare, hash, Some(header), &ids[0]).unwrap();
        let outcome = node.step(&pre);
        assert!(outcome.decided.is_some());
        verify_certificate(&outcome.decided.unwrap(), &cfg).unwrap();
    }

    #[test]
    fn late_commit_grows_certificate() {
        let (ids, cfg) = cluster(4, 1);
        let device = DeviceIdentity::generate().public_key();
        let header = header_for(device, &ids[0], 1);
        let hash = header.header_hash();
        let mut node = ConsensusInstance::new(cfg, device, ids[1].clone()).unwrap();

        node.step(&ConsensusMessage::sign(Phase::PrePrepare, hash, Some(header), &ids[0]).unwrap());
        node.step(&ConsensusMessage::sign(Phase::Prepare, hash, None, &ids[0]).unwrap());
        node.step(&ConsensusMessage::sign(Phase::Prepare, hash, None, &ids[2]).unwrap());
        node.step(&ConsensusMessage::sign(Phase::Commit, hash, None, &ids[0]).unwrap());
        let outcome =
            node.step(&ConsensusMessage::sign(Phase::Commit, hash, None, &ids[2]).unwrap());
        assert!(outcome.decided.is_some());
        assert_eq!(node.certificate().len(), 3);

        let late =
            node.step(&ConsensusMessage::sign(Phase::Commit, hash, None, &ids[3]).unwrap());
        assert!(late.decided.is_none(), "decided is returned exactly once");
        assert!(late.certificate_grew);
        assert_eq!(node.certificate().len(), 4);
    }

    #[test]
    fn consensus_message_wire_roundtrip() {
        let (ids, _cfg) = cluster(4, 1);
        let device = DeviceIdentity::generate().public_key();
        let header = header_for(device, &ids[0], 99);
        let hash = header.header_hash();
        for msg in [
            ConsensusMessage::sign(Phase::PrePrepare, hash, Some(header), &ids[0]).unwrap(),
            ConsensusMessage::sign(Phase::Commit, hash, None, &ids[2]).unwrap(),
        ] {
            let mut enc = FieldEncoder::new();
            msg.encode_into(&mut enc);
            let bytes = enc.finish();
            let mut dec = FieldDecoder::new(&bytes);
            let back = ConsensusMessage::decode(&mut dec).unwrap();
            dec.expect_end().unwrap();
            assert_eq!(back, msg);
        }
    }
}
