import setuptools

with open("README.md", "r") as f:
    LONG_DESCRIPTION = f.read()

setuptools.setup(
    name="maseya-measure",
    version="0.1.0",
    author="Nelson Garcia",
    author_email="swr.ngarcia@gmail.com",
    description="Validate soft-mapped survey constructs with embedded cross-validation.",
    long_description=LONG_DESCRIPTION,
    long_description_content_type="text/markdown",
    url="https://github.com/maseya/measure-py",
    packages=setuptools.find_packages(exclude=["tests", "examples", "examples.*"]),
    package_data={"maseya.measure": ["data/*.json", "data/templates/*.txt"]},
    install_requires=[
        "numpy>=1.24",
        "pandas>=2.0",
        "scipy>=1.10",
        "scikit-learn>=1.3",
        "joblib>=1.3",
        "pydantic>=2.5",
        "requests>=2.31",
    ],
    extras_require={"test": ["pytest>=7.4"]},
    entry_points={"console_scripts": ["maseya-measure=maseya.measure.pipeline:main"]},
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Environment :: Console",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: GNU Lesser General Public License v3 or later (LGPLv3+)",
        "Natural Language :: English",
        "Operating System :: OS Independent",
        "Programming Language :: Python :: 3.9",
        "Topic :: Scientific/Engineering :: Information Analysis",
    ],
    python_requires=">=3.9",
)
