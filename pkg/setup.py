from setuptools import find_packages, setup

setup(
    name='coldrank',
    packages=find_packages("src"),
    package_dir={'': 'src'},
    version='0.1.0',
    description='Computing-power-cost-aware pre-ranking engine for CTR prediction',
    license='MIT',

    install_requires=[
        'requests',
        'numpy',
        'pandas',
        'tabulate',
        'scikit-learn',
        'torch',
        'tqdm',
        'tqdm-logging-wrapper',
        'hdrhistogram',
        'matplotlib',
    ],
    extras_require={
        'test': [
            'pytest',
            'jsonschema',
        ]
    },
    entry_points={
        'console_scripts': ['coldrank=coldrank.__main__:main']
    },
)
