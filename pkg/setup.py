from setuptools import setup, find_packages

exec(open('rhpo_pytorch/version.py').read())

setup(
  name = 'rhpo-pytorch',
  packages = find_packages(exclude=['tests']),
  version = __version__,
  license='MIT',
  description = 'RHPO - Regularized Hierarchical Policy Optimization, mixture policies trained with constrained EM and retrace',
  long_description_content_type = 'text/markdown',
  keywords = [
    'artificial intelligence',
    'deep learning',
    'reinforcement learning',
    'hierarchical reinforcement learning',
    'multitask learning',
    'mixture of gaussians',
    'trust region'
  ],
  install_requires=[
    'beartype',
    'einops>=0.6',
    'einx',
    'filelock',
    'matplotlib',
    'numpy',
    'pandas',
    'torch>=2.0',
    'tqdm'
  ],
  setup_requires=[
    'pytest-runner',
  ],
  tests_require=[
    'hypothesis',
    'mpmath',
    'pytest',
    'scipy'
  ],
  entry_points = {
    'console_scripts': [
      'rhpo = rhpo_pytorch.cli:main'
    ]
  },
  include_package_data = True,
  classifiers=[
    'Development Status :: 4 - Beta',
    'Intended Audience :: Developers',
    'Topic :: Scientific/Engineering :: Artificial Intelligence',
    'License :: OSI Approved :: MIT License',
    'Programming Language :: Python :: 3.8',
  ],
)
