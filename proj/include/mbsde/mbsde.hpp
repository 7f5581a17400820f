#pragma once

#include "mbsde/bmo.hpp"
#include "mbsde/core.hpp"
#include "mbsde/errors.hpp"
#include "mbsde/generator_catalog.hpp"
#include "mbsde/generators.hpp"
#include "mbsde/lattice.hpp"
#include "mbsde/montecarlo.hpp"
#include "mbsde/parallel.hpp"
#include "mbsde/paths.hpp"
#include "mbsde/quadrature.hpp"
#include "mbsde/stability.hpp"
#include "mbsde/terminal.hpp"
