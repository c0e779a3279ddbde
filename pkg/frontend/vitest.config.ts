import { defineConfig } from 'vitest/config';

export default defineConfig({
  test: {
    include: ['tests/**/*.test.ts'],
    environment: 'node',
    // the loop test drives a live service through full estimator runs
    testTimeout: 180_000,
    hookTimeout: 120_000,
  },
});
