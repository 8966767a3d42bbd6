#!/usr/bin/env python
import subprocess
import sys

FLAKE8_ARGS = ['dsresnet_kws', 'tests', '--ignore=E501', 'docs']
PYTEST_ARGS = ['dsresnet_kws/tests.py', 'tests/speech_example']


def exit_on_failure(ret, message=None):
    if ret:
        if message:
            print(message)
        sys.exit(ret)


def flake8_main(args):
    print('Running flake8 code linting')
    ret = subprocess.call(['flake8'] + args)
    print('flake8 failed' if ret else 'flake8 passed')
    return ret


def pytest_main(args):
    print('Running tests with coverage')
    ret = subprocess.call([sys.executable, '-m', 'coverage', 'run',
                           '--source=dsresnet_kws', '-m', 'pytest'] + args)
    if not ret:
        subprocess.call([sys.executable, '-m', 'coverage', 'report'])
    return ret


if '--lintonly' in sys.argv:
    exit_on_failure(flake8_main(FLAKE8_ARGS))
else:
    extra = [arg for arg in sys.argv[1:] if arg != '--stop']
    if '--stop' in sys.argv:
        extra.append('-x')
    exit_on_failure(pytest_main(PYTEST_ARGS + extra), 'tests failed')
