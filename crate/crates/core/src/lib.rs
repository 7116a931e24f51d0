//! Address-tree routing for ad hoc networks: the ATR multipath protocol, the
//! DART single-path baseline and a deterministic discrete-event simulator
//! to compare them.

pub mod addressing;
pub mod allocation;
pub mod error;
pub mod forwarding;
pub mod lookup;
pub mod metrics;
pub mod netsim;
pub mod overlay;
pub mod routing;
pub mod sweep;
pub mod time;

pub use addressing::{sibling_level, sibling_of, Level, NetAddress, NodeId, SiblingRef};
pub use error::{AddressError, ScenarioError};
pub use forwarding::{DataPacket, DropReason, PacketKind};
pub use lookup::{hash_id, IdAddressPair};
pub use routing::{HelloPacket, Mode, RouteEntry, RoutingTable};
pub use time::Micros;
