#pragma once

#include "tavt/buffers.hpp"
#include "tavt/config.hpp"
#include "tavt/envs.hpp"
#include "tavt/errors.hpp"
#include "tavt/metrics.hpp"
#include "tavt/nn.hpp"
#include "tavt/representation.hpp"
#include "tavt/rl.hpp"
#include "tavt/rng.hpp"
#include "tavt/trainer.hpp"
#include "tavt/virtual_tasks.hpp"
