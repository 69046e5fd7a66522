from setuptools import setup

setup(
    name='lie_algebroid_control',
    version='0.1.0',
    package_dir={'': 'src'},
    py_modules=['algebroid', 'argparser', 'clear', 'coadjoint', 'experiment', 'exprlang', 'optctl', 'poisson',
                'run', 'utils'],
    install_requires=[
        'numpy',
        'matplotlib',
    ],
    extras_require={
        'test': ['pytest', 'scipy'],
    },
    entry_points={
        'console_scripts': [
            'algctl = run:main',
            'algctl-clear = clear:main',
        ]
    },
    python_requires='>=3.10',
    description='Optimal control, Poisson brackets and coadjoint orbits on Lie algebroids',
    long_description=open('README.md').read(),
    long_description_content_type='text/markdown'
)
