pytest_plugins = ["steerkit._pytest_plugin"]
