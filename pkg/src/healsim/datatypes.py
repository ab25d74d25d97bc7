JsonData = str | int | float | bool | None | dict[str, 'JsonData'] | list['JsonData']
JsonDict = dict[str, JsonData]

# opaque node identifier, unique per run and never reused
NodeId = int
