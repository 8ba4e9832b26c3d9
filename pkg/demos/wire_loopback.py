"""
Sender and receiver over a socket
=================================

The sender streams raw time tags over TCP. It hands out the symbol pattern
once, when the receiver asks for it during initialization, and never
again. Here both ends run in one process on loopback; the CLI commands
serve-sender and serve-receiver do the same across two processes.
"""
import threading
from collections import Counter

from pulsesync.config import ExperimentConfig
from pulsesync.net import serve_receiver, serve_sender

cfg = ExperimentConfig().updated(session={"duration_s": 3.0})
ready, box = threading.Event(), {}


def sender():
    box["report"] = serve_sender(cfg, port=0,
                                 on_listen=lambda p: (box.update(port=p), ready.set()))


th = threading.Thread(target=sender, daemon=True)
th.start()
ready.wait(30)
engine, proto = serve_receiver(cfg, port=box["port"])
th.join(30)
rep = box["report"]

print(f"sender: {rep.tags_sent} tags in {rep.frames_sent} frames, final state {rep.state.value}")
print(f"receiver: {len(engine.records)} updates, final state {proto.state.value}, "
      f"pattern disclosed {proto.reveals} time(s)")
print("messages seen by the receiver:",
      ", ".join(f"{k.name} x{n}" for k, n in Counter(proto.trace).items()))
if rep.last_status is not None:
    print(f"last status back to the sender: QBER {rep.last_status.qber:.4f}, "
          f"peak width {rep.last_status.a_posteriori_jitter_ps:.1f} ps")
