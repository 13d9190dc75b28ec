"""Walk one capture through the dual-ring protocol, step by step.

The payload ring hands out contiguous byte regions (16-byte granularity,
dead-skip at the wrap); the meta ring publishes fixed 64-byte descriptors
whose ready_seq field flips last, so a consumer never sees a half-written
slot. Run it: `python demos/01_ring_walkthrough.py`.
"""

from tapflow.errors import PayloadRingFull
from tapflow.rings import Descriptor, RingConfig, allocate_rings


def show(ring, label):
    s = ring.state()
    print(f"  {label:<34} head={s.payload_head:>4} tail={s.payload_tail:>4} "
          f"occupancy={s.occupancy:>4}/{s.payload_capacity} "
          f"meta={s.meta_slots - s.free_meta_slots}/{s.meta_slots} in flight")


ring = allocate_rings(RingConfig(payload_capacity=256, meta_slots=4))
print("A 256-byte payload ring with 4 descriptor slots.")
show(ring, "fresh")

print("\n1. The producer reserves two regions and fills them.")
a = ring.reserve_payload(96)
ring.payload_view(a, 96)[:] = b"\xaa" * 96
b = ring.reserve_payload(96)
ring.payload_view(b, 96)[:] = b"\xbb" * 96
show(ring, f"reserved A@{a} and B@{b}")

print("\n2. Only 64 bytes remain at the tail end; a 96-byte region cannot")
print("   fit anywhere yet, and the failed attempt mutates nothing.")
try:
    ring.reserve_payload(96)
except PayloadRingFull as exc:
    print(f"   PayloadRingFull: {exc}")
show(ring, "after rejected reserve")

print("\n3. Descriptors publish in order; ready_seq is written last.")
for offset, name in ((a, "A"), (b, "B")):
    seq = ring.publish(Descriptor(payload_offset=offset, payload_len=96,
                                  hook_id=7, step_seq=0))
    print(f"   published {name} as ready_seq={seq}")
show(ring, "two descriptors in flight")

print("\n4. The consumer polls in publish order, copies the payload out,")
print("   then releases regions in reservation order.")
for desc in ring.poll_ready(2):
    data = bytes(ring.payload_view(desc.payload_offset, desc.payload_len))
    print(f"   ready_seq={desc.ready_seq} offset={desc.payload_offset} "
          f"first byte=0x{data[0]:02x}")
ring.release_payload(a, 96)
show(ring, "released A (tail advances)")

print("\n5. With A gone the head wraps: a 96-byte region dead-skips the")
print("   64-byte tail end and lands at offset 0.")
c = ring.reserve_payload(96)
show(ring, f"reserved C@{c} (64 dead bytes)")
print(f"   dead bytes created so far: {ring.dead_created}")

print("\n6. Releasing everything empties the ring, and an empty ring")
print("   restarts at offset 0: a full-capacity region now fits.")
ring.release_payload(b, 96)
ring.release_payload(c, 96)
show(ring, "empty again")
d = ring.reserve_payload(256)
show(ring, f"reserved the whole ring @{d}")
ring.release_payload(d, 256)
print("\nEvery transition above is the same code the simulator runs.")
