//! Inter-service communication: envelope codec, framing, and the bus.

pub mod bus;
pub mod envelope;
pub mod wire;

pub use bus::{Bus, PublishError, RequestError, RetryPolicy, Subscription, TopicStats, Transport, TransportError};
pub use envelope::{decode, encode, CodecError, Envelope, Kind};
