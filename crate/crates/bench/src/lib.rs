//! Fixture worlds for the benchmarks. Built once per bench group, then
//! borrowed inside the measured closures so setup cost stays out of the
//! numbers.

use std::collections::BTreeMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use eidpki_core::ca::{Hierarchy, IssueRequest, KeySource};
use eidpki_core::card::moc::{FingerprintTemplate, Minutia, DEFAULT_THRESHOLD};
use eidpki_core::card::{sam::Sam, Card, Personalization, PublicDataFile};
use eidpki_core::cert::CertificateProfile;
use eidpki_core::policy::CertificatePolicy;
use eidpki_core::revocation::RevocationReason;
use eidpki_core::scheme::ED25519;
use eidpki_core::{KeyPair, SchemeRegistry, TrustAnchorSet};

pub const T0: u64 = 1_750_000_000;
const DAY: u64 = 86_400;

pub struct World {
    pub registry: SchemeRegistry,
    pub hierarchy: Hierarchy,
    pub anchors: TrustAnchorSet,
    pub card: Card,
    pub sam: Sam,
    pub auth_serial: u64,
    pub sign_serial: u64,
    pub rng: ChaCha20Rng,
}

pub fn template() -> FingerprintTemplate {
    let mut rng = ChaCha20Rng::seed_from_u64(77);
    let minutiae = (0..12)
        .map(|_| Minutia {
            x: (rng.next_u32() % 500) as u16,
            y: (rng.next_u32() % 500) as u16,
            angle: (rng.next_u32() % 360) as u16,
        })
        .collect();
    FingerprintTemplate::new(minutiae, 85).expect("in-range minutiae")
}

/// Root, population authority, and one personalized card with its two
/// certificates.
pub fn world() -> World {
    let registry = SchemeRegistry::builtin();
    let mut rng = ChaCha20Rng::seed_from_u64(4242);
    let mut hierarchy = Hierarchy::new();
    hierarchy
        .init_root("root", ED25519, 2048, &CertificatePolicy::root_default(), "hsm-1", 7300, T0, &registry, &mut rng)
        .unwrap();
    hierarchy
        .init_population(
            "root",
            "population",
            ED25519,
            2048,
            &CertificatePolicy::population_default(),
            "hsm-1",
            3650,
            T0,
            &registry,
            &mut rng,
        )
        .unwrap();
    let auth_pair = registry.generate_key_pair(ED25519, 4096, &mut rng).unwrap();
    let sign_pair = registry.generate_key_pair(ED25519, 4096, &mut rng).unwrap();
    let auth_serial = issue_leaf(&mut hierarchy, &registry, &auth_pair, CertificateProfile::IdentityAuth, &mut rng);
    let sign_serial = issue_leaf(&mut hierarchy, &registry, &sign_pair, CertificateProfile::Signature, &mut rng);
    let population_cert = hierarchy.ca("population").unwrap().authority.certificate.clone();
    let population_key = hierarchy.ca("population").unwrap().signing_key().unwrap().clone();
    let mut master = [0u8; 32];
    rng.fill_bytes(&mut master);
    let mut biographic = BTreeMap::new();
    biographic.insert("name".to_string(), "Bench Holder".to_string());
    let files = vec![PublicDataFile::signed(
        "biographic",
        eidpki_core::enroll::encode_biographic_file(&biographic),
        &population_key,
        &registry,
    )
    .unwrap()];
    let card = Card::personalize(Personalization {
        card_id: "card-bench-1".into(),
        data_files: files,
        pin: "481516".into(),
        auth_pair,
        auth_cert_serial: auth_serial,
        sign_pair,
        sign_cert_serial: sign_serial,
        template: template(),
        match_threshold: DEFAULT_THRESHOLD,
        sm_master_key_label: "bench-batch".into(),
        sm_master_key: master,
        authority_certificate: population_cert,
    })
    .unwrap();
    let mut sam = Sam::new("bench-sam");
    sam.install_master_key("bench-batch", master);
    let anchors = hierarchy.trust_anchors();
    World { registry, hierarchy, anchors, card, sam, auth_serial, sign_serial, rng }
}

/// Issues one end-entity certificate for `pair`; the unit of issuance
/// work the benchmark measures.
pub fn issue_leaf(
    hierarchy: &mut Hierarchy,
    registry: &SchemeRegistry,
    pair: &KeyPair,
    profile: CertificateProfile,
    rng: &mut ChaCha20Rng,
) -> u64 {
    hierarchy
        .issue_end_entity(
            "population",
            &IssueRequest {
                subject_id: "bench-holder".into(),
                profile,
                key_source: KeySource::Public {
                    public_key: pair.public_key.clone(),
                    scheme_id: pair.scheme_id.clone(),
                    key_length_bits: 4096,
                },
                role_attributes: None,
                validity_days: 1825,
            },
            T0,
            registry,
            rng,
        )
        .unwrap()
        .certificate
        .serial()
}

/// A population ledger with `issued` end-entity certificates, the first
/// `revoked` of them revoked. Sized for revocation-list benchmarks.
pub fn populated_ledger(issued: usize, revoked: usize) -> (Hierarchy, SchemeRegistry) {
    let registry = SchemeRegistry::builtin();
    let mut rng = ChaCha20Rng::seed_from_u64(99);
    let mut world = world();
    let pair = registry.generate_key_pair(ED25519, 4096, &mut rng).unwrap();
    let mut serials = Vec::new();
    for index in 0..issued {
        let serial = world
            .hierarchy
            .issue_end_entity(
                "population",
                &IssueRequest {
                    subject_id: format!("holder-{index}"),
                    profile: CertificateProfile::IdentityAuth,
                    key_source: KeySource::Public {
                        public_key: pair.public_key.clone(),
                        scheme_id: pair.scheme_id.clone(),
                        key_length_bits: 4096,
                    },
                    role_attributes: None,
                    validity_days: 1825,
                },
                T0 + (index as u64 % 30) * DAY,
                &registry,
                &mut rng,
            )
            .unwrap()
            .certificate
            .serial();
        serials.push(serial);
    }
    for serial in serials.into_iter().take(revoked) {
        world.hierarchy.revoke("population", serial, RevocationReason::KeyCompromise, T0 + 40 * DAY).unwrap();
    }
    (world.hierarchy, registry)
}
