// Umbrella header.
#pragma once

#include "pluto/autodiff.hpp"
#include "pluto/container.hpp"
#include "pluto/dataset.hpp"
#include "pluto/engine.hpp"
#include "pluto/experiment.hpp"
#include "pluto/optim.hpp"
#include "pluto/pet.hpp"
#include "pluto/sam_ln.hpp"
#include "pluto/selector.hpp"
#include "pluto/service.hpp"
#include "pluto/store.hpp"
#include "pluto/synth.hpp"
#include "pluto/tensor.hpp"
#include "pluto/vit.hpp"
#include "pluto/vit_config.hpp"
