"""Error taxonomy. Every failure the CLI reports as `ERROR <stage>: ...`
derives from PhysrecError and carries the stage name."""


class PhysrecError(Exception):
    stage = "general"

    def __init__(self, msg, stage=None):
        super().__init__(msg)
        if stage is not None:
            self.stage = stage


class UsageError(PhysrecError):
    """Malformed inputs or arguments; maps to exit code 2."""

    stage = "usage"


class StageError(PhysrecError):
    """An optimization stage diverged or was invoked out of order."""


class SimulationUnstable(PhysrecError):
    """Velocity bound exceeded; carries diagnostics."""

    stage = "simulate"

    def __init__(self, msg, frame=None, max_speed=None):
        super().__init__(msg)
        self.frame = frame
        self.max_speed = max_speed


class OutOfSupportError(PhysrecError):
    """A particle left the supported grid interior; names the first index."""

    stage = "simulate"

    def __init__(self, msg, index=None):
        super().__init__(msg)
        self.index = index


class EmptyObjectError(PhysrecError):
    """Seeding found no particle above the alpha threshold (failed static fit)."""

    stage = "seed"
