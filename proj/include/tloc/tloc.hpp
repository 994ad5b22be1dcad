#pragma once

// Everything the command-line tool uses, in one include.

#include "tloc/app.hpp"
#include "tloc/autodiff.hpp"
#include "tloc/bench.hpp"
#include "tloc/evalkit.hpp"
#include "tloc/head.hpp"
#include "tloc/pipeline.hpp"
#include "tloc/sampler.hpp"
#include "tloc/ssm.hpp"
#include "tloc/synthgen.hpp"
#include "tloc/training.hpp"
