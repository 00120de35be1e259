def pytest_configure(config):
    config.addinivalue_line("markers", "slow: seed sweeps over whole scenarios (deselect with -m 'not slow')")
