"""Privacy-preserving spatiotemporal multicast over cellular networks.

A library for delivering messages to mobile devices that resided in a
geographic area during a past time window, without revealing who receives
them.  Base stations hand out per-slot key tokens, senders deposit encrypted
messages at hash-sharded rendezvous points, and handsets poll those shards
using opaque region identifiers derived from their token trail.  A
deterministic discrete-event simulator measures the polling-overhead versus
delivery-accuracy tradeoff of the token hierarchy.
"""

from .crypto import (
    AuthFailure,
    Ciphertext,
    Digest,
    Key,
    NonceCounter,
    RegionId,
    RpId,
    Seed,
    decrypt,
    derive_key,
    encrypt,
    hash_bytes,
    region_id,
    rp_id,
    rp_index,
)
from .protocol import (
    AddressingFailure,
    BaseStation,
    ConfigurationError,
    DepositOutcome,
    DepositRejected,
    DepositRequest,
    PollRequest,
    PollResponse,
    RendezvousPoint,
    SeedTable,
    StoredMessage,
    TrustedPlanner,
    UserEquipment,
)
from .sim import (
    ConfigError,
    MobilityTrace,
    RunResult,
    ScenarioConfig,
    SyntheticMobility,
    TraceMobility,
    generate_mobility,
    ground_truth,
    load_trace,
    run,
    sweep,
)
from .tokens import (
    HierarchyError,
    HierarchyLevel,
    Token,
    TokenHierarchy,
    TokenTrail,
    current_level,
    make_token,
    poll_targets,
    slot_index,
    validate_hierarchy,
)
from .topology import (
    CellMap,
    Clustering,
    Rect,
    Site,
    assign_cell,
    cells_overlapping,
    load_sites,
    random_clusters,
)

__version__ = "0.1.0"
