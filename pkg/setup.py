from setuptools import setup, find_packages

setup(
    name="rdm-ood",
    version="1.0.0",
    packages=find_packages(exclude=['tests', 'tests.*']),
    py_modules=['app', 'config', 'run'],
    include_package_data=True,
    python_requires='>=3.10',
    install_requires=[
        'python-dotenv==1.0.0',
        'click==8.1.6',
        'tqdm==4.65.0',
        'pyyaml==6.0.1',
        'numpy>=1.24',
        'scipy>=1.10',
        'scikit-learn>=1.3',
        'torch>=2.0',
    ],
    extras_require={
        'test': ['pytest==7.4.2', 'pytest-cov==4.1.0'],
    },
    entry_points={
        'console_scripts': [
            'rdm-ood=app:main',
        ],
    },
)
