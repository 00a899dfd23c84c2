from setuptools import setup, find_packages

setup(
    name="staging",
    version='0.1',
    packages=find_packages(include=['src', \
                    'src.apis', \
                    'src.strategies', \
                    'src.util']),
    author="Mia Stein",
    install_requires=['python-dotenv', 'scipy', 'numpy'],
    extras_require={
        'test': ['pytest'],
    },
    entry_points={
        'console_scripts': ['staging-server=src.main:run_server',
                            'analytic-sink=src.main:run_sink',
                            'bench=src.main:run_bench']
    },
)
