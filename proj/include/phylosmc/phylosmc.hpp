#pragma once

#include "evomodel.hpp"
#include "forest.hpp"
#include "ncsmc.hpp"
#include "numeric.hpp"
#include "oracle.hpp"
#include "parallel.hpp"
#include "proposal.hpp"
#include "rng.hpp"
#include "seqio.hpp"
#include "simulate.hpp"
#include "smc.hpp"
#include "sweep.hpp"
#include "tree.hpp"
#include "version.hpp"
#include "vi.hpp"
