from setuptools import setup, find_packages

setup(
    name="keypatch_attention",
    version="0.1",
    packages=find_packages(exclude=["tests", "examples", "examples.*"]),
    install_requires=[
        'numpy',
        'Pillow',
        'scipy',
        'torch',
    ],
    extras_require={
        'test': ['pytest'],
    },
    entry_points={
        'console_scripts': [
            'keypatch=keypatch.main:main',
        ],
    },
)
