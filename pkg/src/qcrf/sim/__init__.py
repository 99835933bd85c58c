"""Register-level simulation of the trace-estimation circuit."""
