from hypothesis import HealthCheck, settings

# model forwards inside property tests blow the default deadline;
# derandomize keeps failures reproducible in CI
settings.register_profile(
    "default",
    deadline=None,
    derandomize=True,
    max_examples=50,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")
