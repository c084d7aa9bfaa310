//! SNAP: minimum-delay chunk streaming over a periodic family of snowball trees.

pub mod delay;
pub mod membership;
pub mod netsim;
pub mod overlay;
pub mod schedule;

pub use delay::{opst_delay, sbt_avg_exact_pow2, sbt_delay, DelayModel};
pub use overlay::{
    build_multi_sbt_pow2, build_overlay, extend_multi_sbt, iset, validate_prop1, validate_prop2,
    EdgeRef, Iset, LevelPolicy, LevelRoster, MultiSbtOverlay, OverlayDoc, OverlayError, PeerId,
    SbtTree,
};
pub use schedule::{
    derive_neighbor_tables, per_peer_upload_load, server_push_plan, simulate_slots, ChunkTrace,
    NeighborTable, SlotRun, SlotSchedule,
};
