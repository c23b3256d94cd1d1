#pragma once

// Library headers. The command-line front end lives in bytelm/cli.hpp and
// additionally needs CLI11 and nlohmann/json.

#include "bytelm/checkpoint.hpp"
#include "bytelm/config.hpp"
#include "bytelm/corpus.hpp"
#include "bytelm/error.hpp"
#include "bytelm/evaluation.hpp"
#include "bytelm/kernels.hpp"
#include "bytelm/model.hpp"
#include "bytelm/parameters.hpp"
#include "bytelm/probe.hpp"
#include "bytelm/random.hpp"
#include "bytelm/training.hpp"
