//! Shared-secret bearer tokens carrying a role claim.
//!
//! A token reads `role:actor.sig` where `sig` is the hex HMAC-SHA256 of
//! `role:actor` under the secret.

use hmac::{Hmac, Mac};
use riskscope_core::rnr::{Actor, Role};
use sha2::Sha256;

type HmacSha256 = Hmac<Sha256>;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AuthError {
    #[error("malformed token")]
    Malformed,
    #[error("bad token signature")]
    BadSignature,
    #[error("unknown role {0:?}")]
    UnknownRole(String),
}

fn role_str(role: Role) -> &'static str {
    match role {
        Role::Expert => "expert",
        Role::Viewer => "viewer",
    }
}

fn mac(secret: &[u8], claim: &str) -> HmacSha256 {
    let mut m = HmacSha256::new_from_slice(secret).expect("hmac accepts any key length");
    m.update(claim.as_bytes());
    m
}

pub fn mint(secret: &[u8], actor: &Actor) -> String {
    let claim = format!("{}:{}", role_str(actor.role), actor.id);
    let sig = hex::encode(mac(secret, &claim).finalize().into_bytes());
    format!("{claim}.{sig}")
}

pub fn verify(secret: &[u8], token: &str) -> Result<Actor, AuthError> {
    let (claim, sig) = token.rsplit_once('.').ok_or(AuthError::Malformed)?;
    let (role, id) = claim.split_once(':').ok_or(AuthError::Malformed)?;
    if id.is_empty() {
        return Err(AuthError::Malformed);
    }
    let sig = hex::decode(sig).map_err(|_| AuthError::Malformed)?;
    mac(secret, claim)
        .verify_slice(&sig)
        .map_err(|_| AuthError::BadSignature)?;
    match role {
        "expert" => Ok(Actor::expert(id)),
        "viewer" => Ok(Actor::viewer(id)),
        other => Err(AuthError::UnknownRole(other.to_string())),
    }
}
