//! Augmented Address Claim (AACL): the object list a control function
//! sends to announce its secondary (Ethernet) interface.
//!
//! Each object is a one-byte id followed by fixed-length attributes in
//! network byte order. Objects carry no length field, so an unknown id
//! makes the rest of the payload unparseable.
//!
//! | id  | object       | attributes                         | bytes |
//! |-----|--------------|------------------------------------|-------|
//! | 1   | IPv4 address | 4 byte address, 2 byte UDP port    | 7     |
//! | 2   | IPv6 address | 16 byte address, 2 byte UDP port   | 19    |

use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};

use thiserror::Error;

use crate::can::{CanFrame, CanId, PGN_AACL};
use crate::channel::DatagramEndpoint;

pub const AACL_PRIORITY: u8 = 6;
pub const OBJECT_IPV4: u8 = 1;
pub const OBJECT_IPV6: u8 = 2;
pub const IPV4_OBJECT_LEN: usize = 7;
pub const IPV6_OBJECT_LEN: usize = 19;
/// How long a requester waits for an AACL answer before treating the peer
/// as legacy.
pub const DEFAULT_AACL_TIMEOUT_US: u64 = 1_250_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AaclError {
    #[error("payload has no objects")]
    Empty,
    #[error("object id {0} appears more than once")]
    Duplicate(u8),
    #[error("object id {0} is reserved")]
    ReservedObject(u8),
    #[error("object {id} truncated: need {need} bytes, have {have}")]
    Truncated { id: u8, need: usize, have: usize },
    #[error("port 0 is not a usable endpoint")]
    ZeroPort,
    #[error("two control functions share {0}")]
    SharedEndpoint(DatagramEndpoint),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AaclObject {
    Ipv4 { address: Ipv4Addr, port: u16 },
    Ipv6 { address: Ipv6Addr, port: u16 },
}

impl AaclObject {
    pub fn object_id(&self) -> u8 {
        match self {
            Self::Ipv4 { .. } => OBJECT_IPV4,
            Self::Ipv6 { .. } => OBJECT_IPV6,
        }
    }

    pub fn port(&self) -> u16 {
        match *self {
            Self::Ipv4 { port, .. } | Self::Ipv6 { port, .. } => port,
        }
    }

    pub fn endpoint(&self) -> DatagramEndpoint {
        match *self {
            Self::Ipv4 { address, port } => DatagramEndpoint::new(IpAddr::V4(address), port),
            Self::Ipv6 { address, port } => DatagramEndpoint::new(IpAddr::V6(address), port),
        }
    }

    pub fn from_endpoint(endpoint: DatagramEndpoint) -> Self {
        match endpoint.address() {
            IpAddr::V4(address) => Self::Ipv4 { address, port: endpoint.port() },
            IpAddr::V6(address) => Self::Ipv6 { address, port: endpoint.port() },
        }
    }

    fn encode_into(&self, out: &mut Vec<u8>) {
        out.push(self.object_id());
        match self {
            Self::Ipv4 { address, .. } => out.extend_from_slice(&address.octets()),
            Self::Ipv6 { address, .. } => out.extend_from_slice(&address.octets()),
        }
        out.extend_from_slice(&self.port().to_be_bytes());
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AaclPayload {
    pub objects: Vec<AaclObject>,
}

impl AaclPayload {
    pub fn new(objects: Vec<AaclObject>) -> Result<Self, AaclError> {
        let payload = Self { objects };
        payload.validate()?;
        Ok(payload)
    }

    pub fn ipv4(address: Ipv4Addr, port: u16) -> Self {
        Self { objects: vec![AaclObject::Ipv4 { address, port }] }
    }

    pub fn from_endpoint(endpoint: DatagramEndpoint) -> Self {
        Self { objects: vec![AaclObject::from_endpoint(endpoint)] }
    }

    fn validate(&self) -> Result<(), AaclError> {
        if self.objects.is_empty() {
            return Err(AaclError::Empty);
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.port() == 0 {
                return Err(AaclError::ZeroPort);
            }
            if self.objects[..i].iter().any(|p| p.object_id() == o.object_id()) {
                return Err(AaclError::Duplicate(o.object_id()));
            }
        }
        Ok(())
    }

    /// Objects in ascending id order, which is also the endpoint preference.
    pub fn sorted(&self) -> Vec<AaclObject> {
        let mut objects = self.objects.clone();
        objects.sort_by_key(AaclObject::object_id);
        objects
    }

    pub fn endpoints(&self) -> Vec<DatagramEndpoint> {
        self.sorted().iter().map(AaclObject::endpoint).collect()
    }

    pub fn encode(&self) -> Result<Vec<u8>, AaclError> {
        self.validate()?;
        let mut out = Vec::with_capacity(IPV4_OBJECT_LEN + IPV6_OBJECT_LEN);
        for o in self.sorted() {
            o.encode_into(&mut out);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, AaclError> {
        let mut objects = Vec::new();
        let mut rest = bytes;
        while let Some(&id) = rest.first() {
            let need = match id {
                OBJECT_IPV4 => IPV4_OBJECT_LEN,
                OBJECT_IPV6 => IPV6_OBJECT_LEN,
                other => return Err(AaclError::ReservedObject(other)),
            };
            if rest.len() < need {
                return Err(AaclError::Truncated { id, need, have: rest.len() });
            }
            let (obj, tail) = rest.split_at(need);
            let port = u16::from_be_bytes([obj[need - 2], obj[need - 1]]);
            let object = if id == OBJECT_IPV4 {
                let octets: [u8; 4] = obj[1..5].try_into().expect("length checked");
                AaclObject::Ipv4 { address: Ipv4Addr::from(octets), port }
            } else {
                let octets: [u8; 16] = obj[1..17].try_into().expect("length checked");
                AaclObject::Ipv6 { address: Ipv6Addr::from(octets), port }
            };
            objects.push(object);
            rest = tail;
        }
        Self::new(objects)
    }
}

pub fn encode_aacl(payload: &AaclPayload) -> Result<Vec<u8>, AaclError> {
    payload.encode()
}

pub fn decode_aacl(bytes: &[u8]) -> Result<AaclPayload, AaclError> {
    AaclPayload::decode(bytes)
}

/// Control functions sharing an IP address must announce distinct ports.
pub fn validate_endpoints<'a>(payloads: impl IntoIterator<Item = &'a AaclPayload>) -> Result<(), AaclError> {
    let mut seen = std::collections::BTreeSet::new();
    for p in payloads {
        for e in p.endpoints() {
            if !seen.insert(e) {
                return Err(AaclError::SharedEndpoint(e));
            }
        }
    }
    Ok(())
}

/// How an AACL answer leaves the node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AaclResponse {
    /// No secondary interface: stay silent so the requester times out.
    Silent,
    /// A 7-byte payload fits one destination-specific frame.
    SingleFrame(CanFrame),
    /// Longer payloads go through the transport protocol.
    Transport { destination: u8, data: Vec<u8> },
}

pub fn respond_to_aacl_request(own: Option<&AaclPayload>, own_sa: u8, requester_sa: u8) -> AaclResponse {
    let Some(bytes) = own.and_then(|p| p.encode().ok()) else {
        return AaclResponse::Silent;
    };
    if bytes.len() <= 8 {
        let id = CanId::new(AACL_PRIORITY, PGN_AACL, requester_sa, own_sa).expect("PDU1 id");
        AaclResponse::SingleFrame(CanFrame::new(id, &bytes).expect("fits"))
    } else {
        AaclResponse::Transport { destination: requester_sa, data: bytes }
    }
}
