"""
Tests for the dependency step of setup.sh
"""

import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import pytest
import tempfile
import shutil
import subprocess

SETUP_SCRIPT = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'setup.sh')

pytestmark = pytest.mark.skipif(shutil.which('bash') is None, reason='bash not available')


def run_install_step(pip_exit_code):
    """Source setup.sh and run install_dependencies against a stub pip"""
    temp_dir = tempfile.mkdtemp()
    try:
        stub = os.path.join(temp_dir, 'pip')
        with open(stub, 'w') as f:
            f.write(f"#!/bin/sh\nexit {pip_exit_code}\n")
        os.chmod(stub, 0o755)
        env = dict(os.environ, PATH=temp_dir + os.pathsep + os.environ.get('PATH', ''))
        return subprocess.run(['bash', '-c', f'source "{SETUP_SCRIPT}"; install_dependencies'],
                              cwd=temp_dir, env=env, capture_output=True, text=True)
    finally:
        shutil.rmtree(temp_dir)


def test_failed_install_stops_setup():
    result = run_install_step(1)
    assert result.returncode == 1
    assert 'Failed to install dependencies' in result.stdout
    assert 'Dependencies installed' not in result.stdout


def test_successful_install_reports():
    result = run_install_step(0)
    assert result.returncode == 0
    assert 'Dependencies installed' in result.stdout


def test_script_parses():
    assert subprocess.run(['bash', '-n', SETUP_SCRIPT]).returncode == 0


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
