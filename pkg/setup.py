from setuptools import setup, find_packages

setup(
    name="sdflow-lab",
    version="0.1.0",
    packages=find_packages(exclude=["tests", "tests.*"]),
    include_package_data=True,
    install_requires=[
        "numpy>=1.26.0",
        "scipy>=1.11.0",
        "pandas>=2.1.0",
        "pydantic>=2.4.2",
        "python-dotenv>=1.0.0",
        "sqlalchemy>=2.0.23",
        "plotly>=5.18.0",
    ],
    extras_require={
        "test": ["pytest>=7.4.0"],
    },
    entry_points={
        "console_scripts": [
            "sdflow=app.main:main",
        ],
    },
    python_requires=">=3.9",
)
